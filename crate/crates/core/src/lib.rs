pub mod canonical;
pub mod impedance;
pub mod scenario;
pub mod se3;
pub mod session;
pub mod sim;
pub mod teleop;
pub mod tracker;

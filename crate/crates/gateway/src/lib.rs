pub mod bundled;
pub mod protocol;
pub mod queue;
pub mod script;
pub mod server;
pub mod session;

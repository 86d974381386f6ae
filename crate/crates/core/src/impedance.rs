//! Two-channel impedance commands.
//!
//! One scalar stiffness drives all three translational axes, another all
//! three rotational axes. Damping is derived per axis with a fixed ratio of
//! 0.707: `d = 2 * 0.707 * sqrt(k)`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DAMPING_RATIO: f64 = 0.707;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpedanceError {
    #[error("stiffness entry {index} is negative or not finite ({value})")]
    Domain { index: usize, value: f64 },
    #[error("{channel} stiffness {value} outside [{min}, {max}]")]
    Bounds {
        channel: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid impedance profile: {0}")]
    Profile(String),
}

/// Normalized FSR readings, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PressurePair {
    translational: f64,
    rotational: f64,
}

impl PressurePair {
    pub fn new(translational: f64, rotational: f64) -> Self {
        Self {
            translational: clamp_unit(translational),
            rotational: clamp_unit(rotational),
        }
    }

    pub fn translational(&self) -> f64 {
        self.translational
    }

    pub fn rotational(&self) -> f64 {
        self.rotational
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpedanceProfile {
    /// N/m
    pub k_t_min: f64,
    pub k_t_max: f64,
    /// N*m/rad
    pub k_r_min: f64,
    pub k_r_max: f64,
    /// N/m per second
    pub slew_t: f64,
    /// N*m/rad per second
    pub slew_r: f64,
}

impl Default for ImpedanceProfile {
    fn default() -> Self {
        Self {
            k_t_min: 100.0,
            k_t_max: 2000.0,
            k_r_min: 5.0,
            k_r_max: 150.0,
            slew_t: 2000.0,
            slew_r: 150.0,
        }
    }
}

impl ImpedanceProfile {
    pub fn validate(&self) -> Result<(), ImpedanceError> {
        let ok_range = |lo: f64, hi: f64| lo >= 0.0 && lo < hi && hi.is_finite();
        if !ok_range(self.k_t_min, self.k_t_max) {
            return Err(ImpedanceError::Profile("need 0 <= k_t_min < k_t_max".into()));
        }
        if !ok_range(self.k_r_min, self.k_r_max) {
            return Err(ImpedanceError::Profile("need 0 <= k_r_min < k_r_max".into()));
        }
        if !(self.slew_t > 0.0 && self.slew_r > 0.0) {
            return Err(ImpedanceError::Profile("slew rates must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, k_t: f64, k_r: f64) -> bool {
        (self.k_t_min..=self.k_t_max).contains(&k_t) && (self.k_r_min..=self.k_r_max).contains(&k_r)
    }

    /// Stiffness as a fraction of each channel's range, for the operator's bars.
    pub fn fractions(&self, k_t: f64, k_r: f64) -> (f64, f64) {
        (
            clamp_unit((k_t - self.k_t_min) / (self.k_t_max - self.k_t_min)),
            clamp_unit((k_r - self.k_r_min) / (self.k_r_max - self.k_r_min)),
        )
    }

    pub fn lowest(&self) -> ImpedanceCommand {
        ImpedanceCommand::from_gains(self.k_t_min, self.k_r_min)
    }
}

/// Diagonal 6x6 stiffness/damping pair in `(x, y, z, rx, ry, rz)` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedanceCommand {
    pub k_t: f64,
    pub k_r: f64,
    pub k_diag: [f64; 6],
    pub d_diag: [f64; 6],
}

impl ImpedanceCommand {
    /// Expands gains without a bounds check; `k_t` and `k_r` must be
    /// non-negative.
    pub(crate) fn from_gains(k_t: f64, k_r: f64) -> Self {
        let k_diag = [k_t, k_t, k_t, k_r, k_r, k_r];
        let d_diag = k_diag.map(damping_for);
        Self { k_t, k_r, k_diag, d_diag }
    }

    pub fn d_t(&self) -> f64 {
        self.d_diag[0]
    }

    pub fn d_r(&self) -> f64 {
        self.d_diag[3]
    }
}

fn damping_for(k: f64) -> f64 {
    2.0 * DAMPING_RATIO * k.sqrt()
}

/// Affine map from pressure to stiffness: zero pressure gives the lower bound,
/// full pressure the upper bound.
pub fn pressure_to_stiffness(p: PressurePair, profile: &ImpedanceProfile) -> (f64, f64) {
    (
        profile.k_t_min + p.translational * (profile.k_t_max - profile.k_t_min),
        profile.k_r_min + p.rotational * (profile.k_r_max - profile.k_r_min),
    )
}

pub fn damping_from_stiffness(k_diag: &[f64; 6]) -> Result<[f64; 6], ImpedanceError> {
    for (index, &value) in k_diag.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(ImpedanceError::Domain { index, value });
        }
    }
    Ok(k_diag.map(damping_for))
}

pub fn expand(k_t: f64, k_r: f64, profile: &ImpedanceProfile) -> Result<ImpedanceCommand, ImpedanceError> {
    if !(profile.k_t_min..=profile.k_t_max).contains(&k_t) {
        return Err(ImpedanceError::Bounds {
            channel: "translational",
            value: k_t,
            min: profile.k_t_min,
            max: profile.k_t_max,
        });
    }
    if !(profile.k_r_min..=profile.k_r_max).contains(&k_r) {
        return Err(ImpedanceError::Bounds {
            channel: "rotational",
            value: k_r,
            min: profile.k_r_min,
            max: profile.k_r_max,
        });
    }
    Ok(ImpedanceCommand::from_gains(k_t, k_r))
}

/// Moves each channel toward `target` by at most `slew * dt`. Targets outside
/// the profile are clamped first.
pub fn slew_limit(
    prev: &ImpedanceCommand,
    target: (f64, f64),
    dt: f64,
    profile: &ImpedanceProfile,
) -> ImpedanceCommand {
    debug_assert!(dt > 0.0);
    let step = |from: f64, to: f64, rate: f64| {
        let max_step = rate * dt;
        from + (to - from).clamp(-max_step, max_step)
    };
    let t_target = target.0.clamp(profile.k_t_min, profile.k_t_max);
    let r_target = target.1.clamp(profile.k_r_min, profile.k_r_max);
    let k_t = step(prev.k_t, t_target, profile.slew_t);
    let k_r = step(prev.k_r, r_target, profile.slew_r);
    if k_t == prev.k_t && k_r == prev.k_r {
        return *prev;
    }
    ImpedanceCommand::from_gains(k_t, k_r)
}

#[derive(Serialize, Deserialize)]
struct CommandRepr {
    kt: f64,
    kr: f64,
}

impl Serialize for ImpedanceCommand {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        CommandRepr { kt: self.k_t, kr: self.k_r }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ImpedanceCommand {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = CommandRepr::deserialize(deserializer)?;
        if !(r.kt >= 0.0 && r.kr >= 0.0) {
            return Err(serde::de::Error::custom("stiffness must be non-negative"));
        }
        Ok(ImpedanceCommand::from_gains(r.kt, r.kr))
    }
}

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use super::{parse_header, parse_line, LogError, StepRecord};
use crate::impedance::damping_from_stiffness;
use crate::teleop::{SCALE_MAX, SCALE_MIN};

const NORM_TOLERANCE: f64 = 1e-6;
const CLOSURE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    Digest,
    Header,
    Ordering,
    QuaternionNorm,
    Bounds,
    DampingClosure,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {:?}: {}", self.line, self.kind, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, line: usize, kind: ViolationKind, detail: String) {
        self.violations.push(Violation { line, kind, detail });
    }
}

/// Checks an episode file line by line. Content problems are collected in
/// the report; a line that does not parse at all aborts with its line number.
pub fn validate<R: BufRead>(input: R) -> Result<ValidationReport, LogError> {
    let mut lines = input.lines();
    let header_text = lines.next().ok_or(LogError::Empty)??;
    let header = parse_header(&header_text)?;
    let mut report = ValidationReport::default();

    let scenario = &header.scenario;
    if header.scenario_digest != scenario.scenario_digest() {
        report.push(1, ViolationKind::Digest, "scenario digest does not match the embedded scenario".into());
    }
    if header.config_digest != scenario.config_digest() {
        report.push(1, ViolationKind::Digest, "config digest does not match the embedded scenario".into());
    }
    if header.dt != scenario.sim.dt {
        report.push(1, ViolationKind::Header, format!("dt {} differs from scenario dt {}", header.dt, scenario.sim.dt));
    }
    if header.decimation == 0 {
        report.push(1, ViolationKind::Header, "decimation must be at least 1".into());
    }

    let profile = &scenario.impedance;
    let mut last_t: Option<f64> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let r: StepRecord = parse_line(&line, line_no)?;
        report.records += 1;
        check_record(&r, line_no, last_t, profile, &mut report);
        last_t = Some(r.t);
    }
    Ok(report)
}

pub fn validate_file(path: &Path) -> Result<ValidationReport, LogError> {
    let file = std::fs::File::open(path)?;
    validate(std::io::BufReader::new(file))
}

fn check_record(
    r: &StepRecord,
    line: usize,
    last_t: Option<f64>,
    profile: &crate::impedance::ImpedanceProfile,
    report: &mut ValidationReport,
) {
    use ViolationKind::*;
    if !r.t.is_finite() {
        report.push(line, NonFinite, "t is not finite".into());
    } else if let Some(last) = last_t {
        if !(r.t > last) {
            report.push(line, Ordering, format!("t = {} does not follow t = {last}", r.t));
        }
    }

    let poses = [
        ("ee_pose", &r.ee_pose),
        ("peg_pose", &r.peg_pose),
        ("hole_pose", &r.hole_pose),
        ("action_goal_pose", &r.action_goal_pose),
    ];
    for (name, pose) in poses {
        if !pose.is_finite() {
            report.push(line, NonFinite, format!("{name} is not finite"));
            continue;
        }
        let n = pose.quaternion_norm();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            report.push(line, QuaternionNorm, format!("{name} quaternion norm {n}"));
        }
    }
    if !(r.ee_twist.is_finite() && r.ext_wrench.is_finite()) {
        report.push(line, NonFinite, "twist or wrench is not finite".into());
    }

    if !(profile.k_t_min..=profile.k_t_max).contains(&r.action_kt) {
        report.push(
            line,
            Bounds,
            format!("k_t {} outside [{}, {}]", r.action_kt, profile.k_t_min, profile.k_t_max),
        );
    }
    if !(profile.k_r_min..=profile.k_r_max).contains(&r.action_kr) {
        report.push(
            line,
            Bounds,
            format!("k_r {} outside [{}, {}]", r.action_kr, profile.k_r_min, profile.k_r_max),
        );
    }
    if !(SCALE_MIN..=SCALE_MAX).contains(&r.scale) {
        report.push(line, Bounds, format!("scale {} outside [{SCALE_MIN}, {SCALE_MAX}]", r.scale));
    }
    if !(0.0..=1.0).contains(&r.vibro) {
        report.push(line, Bounds, format!("vibro {} outside [0, 1]", r.vibro));
    }

    if let Some(d) = r.action_damping {
        let k = [r.action_kt, r.action_kt, r.action_kt, r.action_kr, r.action_kr, r.action_kr];
        match damping_from_stiffness(&k) {
            Ok(expected) => {
                for (axis, (got, want)) in d.iter().zip(expected.iter()).enumerate() {
                    if !((got - want).abs() <= CLOSURE_TOLERANCE * want.abs().max(1.0)) {
                        report.push(line, DampingClosure, format!("axis {axis}: damping {got}, expected {want}"));
                    }
                }
            }
            Err(e) => report.push(line, DampingClosure, e.to_string()),
        }
    }
}

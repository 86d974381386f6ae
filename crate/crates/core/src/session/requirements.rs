use std::fmt;

use super::StepRecord;
use crate::scenario::RequirementThresholds;
use crate::sim::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Satisfied,
    Violated,
    /// The phase the requirement refers to never occurred.
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStats {
    pub phase: Phase,
    pub samples: usize,
    pub duration: f64,
    pub mean_kt: f64,
    pub mean_kr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequirementResult {
    pub id: u8,
    pub phase: Phase,
    pub description: &'static str,
    pub verdict: Verdict,
    pub stats: Option<PhaseStats>,
}

impl fmt::Display for RequirementResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "requirement {} ({}): {:?}", self.id, self.description, self.verdict)?;
        if let Some(s) = &self.stats {
            write!(
                f,
                " [{} samples, mean k_t {:.1} N/m, mean k_r {:.2} N*m/rad]",
                s.samples, s.mean_kt, s.mean_kr
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequirementReport {
    pub thresholds: RequirementThresholds,
    pub results: Vec<RequirementResult>,
    pub phases: Vec<PhaseStats>,
}

impl RequirementReport {
    pub fn all_satisfied(&self) -> bool {
        self.results.iter().all(|r| r.verdict == Verdict::Satisfied)
    }

    pub fn result(&self, id: u8) -> Option<&RequirementResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

fn phase_stats(records: &[StepRecord], phase: Phase) -> Option<PhaseStats> {
    let mut n = 0usize;
    let (mut kt, mut kr, mut duration) = (0.0, 0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        if r.phase != phase {
            continue;
        }
        n += 1;
        kt += r.action_kt;
        kr += r.action_kr;
        if let Some(next) = records.get(i + 1) {
            duration += next.t - r.t;
        }
    }
    (n > 0).then(|| PhaseStats {
        phase,
        samples: n,
        duration,
        mean_kt: kt / n as f64,
        mean_kr: kr / n as f64,
    })
}

/// Per-phase impedance requirements over the logged actions:
/// low k_t while reaching, high k_t while transporting, low k_t while
/// aligning, and high k_t with low k_r while inserting.
pub fn check_requirements(records: &[StepRecord], thresholds: &RequirementThresholds) -> RequirementReport {
    let th = *thresholds;
    let phases: Vec<PhaseStats> = Phase::ALL.iter().filter_map(|p| phase_stats(records, *p)).collect();
    let stats_for = |p: Phase| phases.iter().find(|s| s.phase == p).copied();

    type Test = fn(&PhaseStats, &RequirementThresholds) -> bool;
    let specs: [(u8, Phase, &'static str, Test); 4] = [
        (1, Phase::Reach, "low k_t while reaching", |s, th| s.mean_kt < th.kt_low),
        (2, Phase::Transport, "high k_t while transporting", |s, th| s.mean_kt > th.kt_high),
        (3, Phase::Align, "low k_t while aligning", |s, th| s.mean_kt < th.kt_low),
        (4, Phase::Insert, "high k_t and low k_r while inserting", |s, th| {
            s.mean_kt > th.kt_high && s.mean_kr < th.kr_low
        }),
    ];
    let results = specs
        .into_iter()
        .map(|(id, phase, description, test)| {
            let stats = stats_for(phase);
            let verdict = match &stats {
                None => Verdict::Incomplete,
                Some(s) if test(s, &th) => Verdict::Satisfied,
                Some(_) => Verdict::Violated,
            };
            RequirementResult {
                id,
                phase,
                description,
                verdict,
                stats,
            }
        })
        .collect();
    RequirementReport {
        thresholds: th,
        results,
        phases,
    }
}

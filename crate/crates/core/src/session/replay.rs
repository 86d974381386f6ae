use super::{Episode, LogError, StepRecord};
use crate::scenario::Scenario;
use crate::se3::geodesic_angle;
use crate::sim::World;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub records_compared: usize,
    /// Largest end-effector or peg position difference (m).
    pub max_position_divergence: f64,
    /// Largest end-effector or peg orientation difference (rad).
    pub max_orientation_divergence: f64,
    /// Time of the record with the largest position difference.
    pub worst_t: f64,
    pub warnings: Vec<String>,
}

impl ReplayReport {
    fn observe(&mut self, world: &World, r: &StepRecord) {
        let pairs = [(&world.ee().pose, &r.ee_pose), (&world.peg().pose, &r.peg_pose)];
        for (sim, logged) in pairs {
            let dp = (sim.position - logged.position).norm();
            let dr = geodesic_angle(&sim.orientation, &logged.orientation);
            if dp > self.max_position_divergence {
                self.max_position_divergence = dp;
                self.worst_t = r.t;
            }
            self.max_orientation_divergence = self.max_orientation_divergence.max(dr);
        }
        self.records_compared += 1;
    }
}

/// Re-simulates `episode` under `scenario` after checking that the physics
/// it was recorded with is the same.
pub fn replay(episode: &Episode, scenario: &Scenario) -> Result<ReplayReport, LogError> {
    let current = scenario.scenario_digest();
    if current != episode.header.scenario_digest {
        return Err(LogError::IncompatibleScenario {
            recorded: episode.header.scenario_digest.clone(),
            current,
        });
    }
    replay_unchecked(episode, scenario)
}

/// Feeds the logged actions into a fresh simulator built from `scenario` and
/// the header's initial state, holding each action for `decimation` steps,
/// and compares every logged state with the re-simulated one.
pub fn replay_unchecked(episode: &Episode, scenario: &Scenario) -> Result<ReplayReport, LogError> {
    let header = &episode.header;
    let mut world = World::from_state(scenario.sim, scenario.scene, &header.initial_state, header.seed)?;
    let mut report = ReplayReport::default();
    if let Some(d) = &episode.truncated_tail {
        report
            .warnings
            .push(format!("truncated file: replayed the {} records before line {}", episode.records.len(), d.line));
    }
    if header.decimation > 1 {
        report.warnings.push(format!(
            "decimated log (every {} steps): actions are held between records",
            header.decimation
        ));
    }
    for (i, r) in episode.records.iter().enumerate() {
        if i > 0 {
            let prev = episode.records[i - 1].commands(scenario)?;
            let target = r.step;
            while world.steps() < target {
                world.step(&prev)?;
            }
        } else if r.step != world.steps() {
            report.warnings.push(format!(
                "first record is at step {}, initial state at step {}",
                r.step,
                world.steps()
            ));
            let cmd = r.commands(scenario)?;
            while world.steps() < r.step {
                world.step(&cmd)?;
            }
        }
        report.observe(&world, r);
    }
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    Ok(report)
}

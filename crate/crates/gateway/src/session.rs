//! The single-owner operator session: tracker, teleoperation pipeline,
//! impedance slew, simulator and episode recorder, advanced one fixed step at
//! a time. Both the live server and the scripted operator drive this type.

use std::io::Write;

use teleimp_core::impedance::{pressure_to_stiffness, slew_limit, ImpedanceCommand, PressurePair};
use teleimp_core::scenario::{PoseMode, Scenario};
use teleimp_core::se3::{Pose, Wrench};
use teleimp_core::session::{EpisodeHeader, EpisodeWriter, LogError, OperatorSnapshot, StepRecord};
use teleimp_core::sim::{Commands, EpisodeStatus, SimError, World};
use teleimp_core::teleop::{TeleopError, TeleopPipeline};
use teleimp_core::tracker::{synth_observe, PolyhedronGeometry, Tracker, TrackerError};
use thiserror::Error;

use crate::protocol::{ClientMessage, Telemetry};

pub type Sink = Box<dyn Write + Send>;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Why a valid message had no effect.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Rejection {
    #[error(transparent)]
    Teleop(#[from] TeleopError),
    #[error("pose sample rejected: {0}")]
    Pose(String),
}

/// What applying a message changed, beyond the obvious.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Nothing,
    Engaged,
    Disengaged,
}

/// Seed for the synthetic observations of the `n`-th pose sample.
pub fn sample_seed(base: u64, n: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = base ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Recording {
    writer: EpisodeWriter<Sink>,
    start_step: u64,
    decimation: u64,
}

pub struct Session {
    scenario: Scenario,
    world: World,
    tracker: Tracker,
    teleop: TeleopPipeline,
    impedance: ImpedanceCommand,
    target: (f64, f64),
    samples: u64,
    ext_wrench: Wrench,
    status: EpisodeStatus,
    recording: Option<Recording>,
}

impl Session {
    pub fn new(scenario: Scenario) -> Result<Self, SessionError> {
        scenario
            .validate()
            .map_err(|e| SessionError::Config(e.to_string()))?;
        let world = World::new(scenario.sim, scenario.scene, scenario.episode.seed)?;
        let tracker = Tracker::new(
            PolyhedronGeometry::default_cube(),
            scenario.tracker.config(),
        )
        .map_err(|e| SessionError::Config(e.to_string()))?;
        let teleop = TeleopPipeline::new(scenario.teleop, world.ee().pose);
        let impedance = scenario.impedance.lowest();
        let status = world.status();
        Ok(Self {
            target: (impedance.k_t, impedance.k_r),
            impedance,
            scenario,
            world,
            tracker,
            teleop,
            samples: 0,
            ext_wrench: Wrench::zero(),
            status,
            recording: None,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn teleop(&self) -> &TeleopPipeline {
        &self.teleop
    }

    pub fn t(&self) -> f64 {
        self.world.t()
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn impedance(&self) -> ImpedanceCommand {
        self.impedance
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    /// Applies one operator message at the current simulation time.
    pub fn apply(&mut self, msg: &ClientMessage) -> Result<Applied, Rejection> {
        let now = self.world.t();
        match *msg {
            ClientMessage::PoseSample { p, q, .. } => {
                let pose = Pose::from_arrays(p, q).map_err(|e| Rejection::Pose(e.to_string()))?;
                self.leader_sample(pose, now)?;
            }
            ClientMessage::Fsr { pt, pr, .. } => {
                self.target =
                    pressure_to_stiffness(PressurePair::new(pt, pr), &self.scenario.impedance);
            }
            ClientMessage::GripperToggle => {
                self.teleop.toggle_gripper();
            }
            ClientMessage::TeleopToggle => {
                let leader = self.tracker.held(now).ok();
                let engaged = self.teleop.toggle_teleop(leader.as_ref())?;
                return Ok(if engaged {
                    Applied::Engaged
                } else {
                    Applied::Disengaged
                });
            }
            ClientMessage::ScaleSet { s } => {
                self.teleop.set_scale(s);
            }
        }
        Ok(Applied::Nothing)
    }

    fn leader_sample(&mut self, pose: Pose, now: f64) -> Result<(), Rejection> {
        let tracked = match self.scenario.tracker.mode {
            PoseMode::Direct => self.tracker.accept_direct(pose, now),
            PoseMode::Markers => {
                let seed = sample_seed(self.scenario.episode.seed, self.samples);
                self.samples += 1;
                let cfg = *self.tracker.config();
                let obs = synth_observe(
                    &pose,
                    self.tracker.geometry(),
                    &cfg,
                    &self.scenario.tracker.noise,
                    now,
                    seed,
                );
                match self.tracker.track_step(&obs, now) {
                    Ok(tp) => tp,
                    Err(TrackerError::NoPoseYet) => return Ok(()),
                    Err(e) => return Err(Rejection::Pose(e.to_string())),
                }
            }
        };
        // a held pose carries no new information
        if tracked.timestamp == now {
            self.teleop.update(&tracked.pose_world);
        }
        Ok(())
    }

    fn operator_snapshot(&self) -> OperatorSnapshot {
        OperatorSnapshot {
            scale: self.teleop.scale().get(),
            clutch_engaged: self.teleop.engaged(),
            vibro: self.teleop.haptic(&self.ext_wrench).amplitude(),
        }
    }

    /// Action the next step will apply, after slew limiting.
    fn next_action(&mut self) -> Commands {
        self.impedance = slew_limit(
            &self.impedance,
            self.target,
            self.scenario.sim.dt,
            &self.scenario.impedance,
        );
        Commands {
            goal: self.teleop.goal(),
            impedance: self.impedance,
            gripper: self.teleop.gripper(),
        }
    }

    /// Advances the simulation by one fixed step, logging first if a
    /// recording is active.
    pub fn step(&mut self) -> Result<(), SessionError> {
        let cmd = self.next_action();
        self.ext_wrench = self.world.estimate_external_wrench();
        let snapshot = self.operator_snapshot();
        if let Some(rec) = self.recording.as_mut() {
            if (self.world.steps() - rec.start_step) % rec.decimation == 0 {
                let record = StepRecord::capture(&self.world, self.ext_wrench, &cmd, snapshot);
                rec.writer.append_step(&record)?;
            }
        }
        self.world.step(&cmd)?;
        self.status = self.world.status();
        Ok(())
    }

    /// Starts logging into `sink`; any active recording is finalized first.
    pub fn start_recording(
        &mut self,
        sink: Sink,
        episode_id: String,
        start_wall_time: Option<f64>,
    ) -> Result<(), SessionError> {
        self.stop_recording()?;
        let header = EpisodeHeader::new(
            &self.scenario,
            episode_id,
            start_wall_time,
            self.world.state(),
        );
        let writer = EpisodeWriter::new(sink, &header, self.scenario.episode.flush_every)?;
        self.recording = Some(Recording {
            writer,
            start_step: self.world.steps(),
            decimation: u64::from(self.scenario.episode.log_decimation),
        });
        Ok(())
    }

    /// Finalizes the active recording; returns the number of records written.
    pub fn stop_recording(&mut self) -> Result<Option<u64>, SessionError> {
        match self.recording.take() {
            Some(mut rec) => {
                rec.writer.close()?;
                Ok(Some(rec.writer.records()))
            }
            None => Ok(None),
        }
    }

    pub fn telemetry(&self) -> Telemetry {
        let now = self.world.t();
        let stale = self.tracker.held(now).map_or(true, |tp| tp.stale);
        Telemetry {
            t: now,
            ee_pose: self.world.ee().pose,
            goal_pose: self.teleop.goal(),
            kt: self.impedance.k_t,
            kr: self.impedance.k_r,
            ext_force_norm: self.ext_wrench.force.norm(),
            phase: self.status.phase,
            success: self.status.success,
            stale,
            peg_pose: self.world.peg().pose,
            hole_pose: self.world.scene().hole_pose,
            gripper: self.world.gripper(),
            engaged: self.teleop.engaged(),
            scale: self.teleop.scale().get(),
        }
    }

    /// Stiffness bar fractions.
    pub fn bars(&self) -> (f64, f64) {
        self.scenario
            .impedance
            .fractions(self.impedance.k_t, self.impedance.k_r)
    }

    pub fn haptic_amplitude(&self) -> f64 {
        self.teleop.haptic(&self.ext_wrench).amplitude()
    }
}

//! The bundled peg-in-hole demonstration: compliant reach, grasp, stiff
//! transport, compliant align at half scale, then stiff insertion with a soft
//! wrist. The operator ratchets with the clutch to keep the handheld
//! interface in view of the camera.

use nalgebra::Vector3;

use crate::protocol::ClientMessage;
use crate::script::{OperatorScript, ScriptEntry};

/// Pose sample period (s).
pub const SAMPLE_PERIOD: f64 = 0.02;

/// Interface position the operator returns to when re-centering.
pub const LEADER_HOME: [f64; 3] = [0.0, 0.0, 0.30];

pub const BUNDLED_SCRIPT: &str = include_str!("../scripts/peg_in_hole.jsonl");
pub const BUNDLED_SCENARIO: &str = include_str!("../scenarios/peg_in_hole.toml");

struct Builder {
    t: f64,
    next_sample: u64,
    leader: Vector3<f64>,
    entries: Vec<ScriptEntry>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

impl Builder {
    fn new() -> Self {
        Self {
            t: 0.0,
            next_sample: 0,
            leader: Vector3::from(LEADER_HOME),
            entries: Vec::new(),
        }
    }

    fn sample(&mut self, t: f64, p: Vector3<f64>) {
        let t = round_us(t);
        let p = [p.x, p.y, p.z].map(|c| (c * 1e6).round() / 1e6);
        self.entries.push(ScriptEntry {
            t,
            msg: ClientMessage::PoseSample {
                t,
                p,
                q: [1.0, 0.0, 0.0, 0.0],
            },
        });
    }

    fn send(&mut self, msg: ClientMessage) -> &mut Self {
        let t = round_us(self.t);
        let msg = match msg {
            ClientMessage::Fsr { pt, pr, .. } => ClientMessage::Fsr { t, pt, pr },
            other => other,
        };
        self.entries.push(ScriptEntry { t, msg });
        self
    }

    fn fsr(&mut self, pt: f64, pr: f64) -> &mut Self {
        self.send(ClientMessage::Fsr { t: 0.0, pt, pr })
    }

    /// Moves the interface to `target` over `duration` seconds along a
    /// smoothstep profile, streaming pose samples.
    fn move_to(&mut self, target: [f64; 3], duration: f64) -> &mut Self {
        let from = self.leader;
        let to = Vector3::from(target);
        let end = self.t + duration;
        loop {
            let ts = self.next_sample as f64 * SAMPLE_PERIOD;
            if ts > end + 1e-9 {
                break;
            }
            let s = if duration > 0.0 {
                smoothstep((ts - self.t) / duration)
            } else {
                1.0
            };
            self.sample(ts, from + (to - from) * s);
            self.next_sample += 1;
        }
        self.t = end;
        self.leader = to;
        self
    }

    fn hold(&mut self, duration: f64) -> &mut Self {
        let here = [self.leader.x, self.leader.y, self.leader.z];
        self.move_to(here, duration)
    }

    fn nudge(&mut self, delta: [f64; 3], duration: f64) -> &mut Self {
        let target = self.leader + Vector3::from(delta);
        self.move_to([target.x, target.y, target.z], duration)
    }
}

/// Generates the bundled script; `scripts/peg_in_hole.jsonl` is this output.
pub fn peg_in_hole_script() -> OperatorScript {
    let mut b = Builder::new();
    b.fsr(0.0, 0.1).hold(0.1).send(ClientMessage::TeleopToggle);

    // reach: compliant, down onto the top of the peg
    b.nudge([0.0, 0.0, -0.20], 2.0).hold(1.0);
    b.send(ClientMessage::GripperToggle).hold(0.1);

    // transport: stiffen, lift over the fixture and carry toward the hole
    b.fsr(1.0, 0.6).hold(1.0);
    b.nudge([0.14, 0.0, 0.22], 2.0).hold(1.0);
    b.send(ClientMessage::TeleopToggle);
    b.fsr(0.08, 0.1);
    b.move_to(LEADER_HOME, 1.0).hold(0.2);
    b.send(ClientMessage::TeleopToggle);

    // align: compliant, over the mouth
    b.nudge([0.16, 0.0, 0.0], 1.5).hold(1.5);
    b.send(ClientMessage::TeleopToggle);
    b.move_to([0.0, 0.0, 0.36], 1.0).hold(0.2);
    b.send(ClientMessage::TeleopToggle);
    b.send(ClientMessage::ScaleSet { s: 0.5 });
    b.nudge([0.0, 0.0, -0.10], 2.0).hold(0.2);

    // insert: stiff translation, soft rotation
    b.fsr(1.0, 0.1);
    b.nudge([0.0, 0.0, -0.22], 4.0).hold(3.0);
    OperatorScript::new(b.entries).expect("builder emits nondecreasing times")
}

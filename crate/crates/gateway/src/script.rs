//! Headless scripted operator: timestamped client messages injected against
//! the fixed-step simulation clock.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use teleimp_core::scenario::Scenario;
use teleimp_core::sim::EpisodeStatus;
use thiserror::Error;

use crate::protocol::ClientMessage;
use crate::session::{Rejection, Session, SessionError, Sink};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub t: f64,
    pub msg: ClientMessage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatorScript {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("script line {line}: t = {t} precedes the previous entry")]
    Order { line: usize, t: f64 },
    #[error("script runs to t = {t}, past the episode cap of {cap} s")]
    BeyondCap { t: f64, cap: f64 },
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl OperatorScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ScriptError> {
        for (i, pair) in entries.windows(2).enumerate() {
            if !(pair[1].t >= pair[0].t) {
                return Err(ScriptError::Order {
                    line: i + 2,
                    t: pair[1].t,
                });
            }
        }
        if let Some(e) = entries.first().filter(|e| !(e.t >= 0.0)) {
            return Err(ScriptError::Order { line: 1, t: e.t });
        }
        Ok(Self { entries })
    }

    /// Reads one entry per line; blank lines and lines starting with `#` are skipped.
    pub fn read<R: BufRead>(input: R) -> Result<Self, ScriptError> {
        let mut entries = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(trimmed).map_err(|e| ScriptError::Parse {
                    line: i + 1,
                    detail: e.to_string(),
                })?;
            if !(entry.t >= last) || !(entry.t >= 0.0) {
                return Err(ScriptError::Order {
                    line: i + 1,
                    t: entry.t,
                });
            }
            last = entry.t;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("JSON is UTF-8")
    }

    pub fn duration(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct ScriptOutcome {
    pub status: ExitStatus,
    pub final_status: EpisodeStatus,
    pub sim_time: f64,
    pub records: u64,
    /// Messages that were valid but had no effect, with their script time.
    pub rejections: Vec<(f64, Rejection)>,
    pub final_peg: teleimp_core::se3::Pose,
}

/// Identifier used for scripted episodes; depends only on the inputs.
pub fn script_episode_id(scenario: &Scenario) -> String {
    format!(
        "script-{}-{}",
        scenario.episode.seed,
        &scenario.config_digest()[..12]
    )
}

/// Runs `script` against a fresh session, logging every step into `sink`.
/// Stops at success or once the episode cap is reached.
pub fn run_script(
    script: &OperatorScript,
    scenario: &Scenario,
    sink: Sink,
) -> Result<ScriptOutcome, ScriptError> {
    let cap = scenario.episode.max_duration;
    if script.duration() > cap {
        return Err(ScriptError::BeyondCap {
            t: script.duration(),
            cap,
        });
    }
    let mut session = Session::new(*scenario)?;
    session.start_recording(sink, script_episode_id(scenario), None)?;
    let dt = scenario.sim.dt;
    let mut next = 0;
    let mut rejections = Vec::new();
    let status = loop {
        let now = session.t();
        // entries due before the midpoint of the coming step are applied now
        while let Some(e) = script.entries.get(next).filter(|e| e.t < now + 0.5 * dt) {
            if let Err(r) = session.apply(&e.msg) {
                tracing::debug!(t = e.t, "rejected: {r}");
                rejections.push((e.t, r));
            }
            next += 1;
        }
        if session.status().success {
            break ExitStatus::Success;
        }
        if now >= cap - 0.5 * dt {
            break ExitStatus::Timeout;
        }
        session.step()?;
    };
    let records = session.stop_recording()?.unwrap_or(0);
    Ok(ScriptOutcome {
        status,
        final_status: session.status(),
        sim_time: session.t(),
        records,
        rejections,
        final_peg: session.world().peg().pose,
    })
}

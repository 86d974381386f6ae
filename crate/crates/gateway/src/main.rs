use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use teleimp_core::scenario::Scenario;
use teleimp_core::session::{check_requirements, read_episode_file, replay, validate_file};
use teleimp_gateway::bundled::{BUNDLED_SCENARIO, BUNDLED_SCRIPT};
use teleimp_gateway::script::{run_script, ExitStatus, OperatorScript};
use teleimp_gateway::server::{serve, ServeConfig, DEFAULT_PORT};
use tracing_subscriber::EnvFilter;

/// Largest replay divergence accepted as a faithful reproduction (m).
const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "teleimp",
    version,
    about = "Tele-impedance peg-in-hole simulator and operator gateway"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the operator protocol over WebSocket and NDJSON on one port.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Scenario TOML; the bundled peg-in-hole scenario if omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Telemetry rate (Hz); the scenario's rate if omitted.
        #[arg(long)]
        rate: Option<f64>,
        /// Directory for episode files.
        #[arg(long, default_value = "episodes")]
        log_dir: PathBuf,
    },
    /// Run a scripted operator headless and record the episode.
    Script {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Operator script (JSONL); the bundled peg-in-hole script if omitted.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-simulate an episode and report divergence from the recording.
    Replay {
        #[arg(long)]
        file: PathBuf,
    },
    /// Check an episode file against the log schema and invariants.
    Validate {
        #[arg(long)]
        file: PathBuf,
    },
    /// Evaluate the per-phase stiffness requirements on an episode.
    CheckReqs {
        #[arg(long)]
        file: PathBuf,
    },
}

fn load_scenario(path: Option<&Path>) -> anyhow::Result<Scenario> {
    match path {
        Some(p) => Scenario::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Scenario::from_toml_str(BUNDLED_SCENARIO)?),
    }
}

fn pass(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve {
            port,
            scenario,
            rate,
            log_dir,
        } => {
            let mut cfg = ServeConfig::new(load_scenario(scenario.as_deref())?, log_dir);
            if let Some(rate) = rate {
                cfg.telemetry_rate = rate;
            }
            tokio::runtime::Runtime::new()?.block_on(serve(port, cfg))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Script {
            scenario,
            script,
            out,
        } => {
            let scenario = load_scenario(scenario.as_deref())?;
            let script = match script {
                Some(p) => {
                    OperatorScript::load(&p).with_context(|| format!("loading {}", p.display()))?
                }
                None => OperatorScript::read(BUNDLED_SCRIPT.as_bytes())?,
            };
            let file = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let started = std::time::Instant::now();
            let outcome = run_script(&script, &scenario, Box::new(file))?;
            let g = outcome.final_status.geometry;
            println!(
                "{:?}: t = {:.3} s sim ({:.2} s wall), depth {:.1} mm, offset {:.2} mm, tilt {:.2} deg, {} records -> {}",
                outcome.status,
                outcome.sim_time,
                started.elapsed().as_secs_f64(),
                g.depth * 1e3,
                g.lateral_offset * 1e3,
                g.tilt.to_degrees(),
                outcome.records,
                out.display()
            );
            for (t, r) in &outcome.rejections {
                println!("  rejected at t = {t}: {r}");
            }
            Ok(pass(outcome.status == ExitStatus::Success))
        }
        Command::Replay { file } => {
            let episode = read_episode_file(&file)?;
            let report = replay(&episode, &episode.header.scenario)?;
            for w in &report.warnings {
                println!("warning: {w}");
            }
            println!(
                "{} records compared, max divergence {:.3e} m / {:.3e} rad at t = {:.3}",
                report.records_compared,
                report.max_position_divergence,
                report.max_orientation_divergence,
                report.worst_t
            );
            Ok(pass(report.max_position_divergence < REPLAY_TOLERANCE))
        }
        Command::Validate { file } => {
            let report = validate_file(&file)?;
            for v in &report.violations {
                println!("line {}: {:?}: {}", v.line, v.kind, v.detail);
            }
            println!(
                "{} records, {} violations",
                report.records,
                report.violations.len()
            );
            Ok(pass(report.violations.is_empty()))
        }
        Command::CheckReqs { file } => {
            let episode = read_episode_file(&file)?;
            let report =
                check_requirements(&episode.records, &episode.header.scenario.requirements);
            for r in &report.results {
                println!("{r}");
            }
            Ok(pass(report.all_satisfied()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

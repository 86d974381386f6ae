use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleimp_core::scenario::Scenario;
use teleimp_core::session::{read_episode_file, replay, validate_file};
use teleimp_core::tracker::NoiseSpec;
use teleimp_gateway::bundled::{peg_in_hole_script, BUNDLED_SCENARIO};
use teleimp_gateway::protocol::ClientMessage;
use teleimp_gateway::script::{run_script, OperatorScript, ScriptEntry, ScriptOutcome};

fn bundled() -> Scenario {
    Scenario::from_toml_str(BUNDLED_SCENARIO).unwrap()
}

fn record(script: &OperatorScript, scenario: &Scenario, path: &Path) -> ScriptOutcome {
    run_script(
        script,
        scenario,
        Box::new(std::fs::File::create(path).unwrap()),
    )
    .unwrap()
}

#[test]
fn same_script_and_seed_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let script = peg_in_hole_script();
    record(&script, &bundled(), &a);
    record(&script, &bundled(), &b);
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
}

#[test]
fn bundled_episode_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.jsonl");
    record(&peg_in_hole_script(), &bundled(), &path);
    let episode = read_episode_file(&path).unwrap();
    let report = replay(&episode, &bundled()).unwrap();
    assert!(report.max_position_divergence < 1e-9, "{report:?}");
    assert!(report.warnings.is_empty());
}

#[test]
fn halving_dt_moves_the_final_peg_less_than_a_millimeter() {
    let script = peg_in_hole_script();
    let sink = || Box::new(std::io::sink());
    let nominal = run_script(&script, &bundled(), sink()).unwrap();
    let mut fine = bundled();
    fine.sim.dt /= 2.0;
    let halved = run_script(&script, &fine, sink()).unwrap();
    let (dp, _) = nominal.final_peg.distance_to(&halved.final_peg);
    assert!(dp < 1e-3, "{dp}");
    assert_eq!(nominal.status, halved.status);
}

fn random_script(rng: &mut ChaCha8Rng, duration: f64) -> OperatorScript {
    let mut entries = Vec::new();
    let mut p: [f64; 3] = [0.0, 0.0, 0.3];
    let mut t = 0.0;
    while t <= duration {
        for c in &mut p {
            *c += rng.random_range(-0.004..0.004);
        }
        p[0] = p[0].clamp(-0.15, 0.15);
        p[1] = p[1].clamp(-0.1, 0.1);
        p[2] = p[2].clamp(0.2, 0.4);
        entries.push(ScriptEntry {
            t,
            msg: ClientMessage::PoseSample {
                t,
                p,
                q: [1.0, 0.0, 0.0, 0.0],
            },
        });
        if rng.random_range(0.0..1.0) < 0.1 {
            let msg = match rng.random_range(0..4) {
                0 => ClientMessage::Fsr {
                    t,
                    pt: rng.random_range(0.0..=1.0),
                    pr: rng.random_range(0.0..=1.0),
                },
                1 => ClientMessage::TeleopToggle,
                2 => ClientMessage::GripperToggle,
                _ => ClientMessage::ScaleSet {
                    s: rng.random_range(0.1..=2.0),
                },
            };
            entries.push(ScriptEntry { t, msg });
        }
        t = ((t + 0.02) * 1e6).round() / 1e6;
    }
    OperatorScript::new(entries).unwrap()
}

#[test]
fn randomized_scripted_episodes_validate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100u64 {
        let mut scenario = bundled();
        scenario.episode.seed = i;
        scenario.episode.max_duration = 1.0;
        scenario.episode.log_decimation = if i % 4 == 0 { 3 } else { 1 };
        scenario.tracker.noise = NoiseSpec {
            pos_sigma: 0.001,
            rot_sigma: 0.5f64.to_radians(),
            flip_probability: 0.3,
            flip_alpha_band: (0.0, 0.6),
        };
        let script = random_script(&mut rng, 0.9);
        let path = dir.path().join(format!("{i}.jsonl"));
        let out = record(&script, &scenario, &path);
        let report = validate_file(&path).unwrap();
        assert!(
            report.violations.is_empty(),
            "episode {i}: {:?}",
            report.violations
        );
        assert_eq!(report.records, out.records as usize);
        if scenario.episode.log_decimation == 1 {
            let episode = read_episode_file(&path).unwrap();
            let r = replay(&episode, &scenario).unwrap();
            assert!(r.max_position_divergence < 1e-9, "episode {i}: {r:?}");
        }
    }
}

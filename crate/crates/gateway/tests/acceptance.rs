//! One line per acceptance criterion, written straight to stderr so it shows
//! without `--nocapture`.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleimp_core::impedance::{damping_from_stiffness, expand, ImpedanceProfile};
use teleimp_core::scenario::Scenario;
use teleimp_core::se3::{exp_rotation, geodesic_angle, weighted_pose_mean, Pose};
use teleimp_core::session::{check_requirements, read_episode_file, replay};
use teleimp_core::sim::{Commands, SceneConfig, SimConfig, World};
use teleimp_core::teleop::{GripperState, TeleopConfig, TeleopPipeline};
use teleimp_core::tracker::{
    cosine_weight, fuse, synth_observe, MarkerObservation, NoiseSpec, PolyhedronGeometry,
    TrackedPose, TrackerConfig,
};
use teleimp_gateway::bundled::{BUNDLED_SCENARIO, BUNDLED_SCRIPT};
use teleimp_gateway::protocol::{
    decode_client, decode_server, encode, ClientMessage, ServerMessage,
};
use teleimp_gateway::script::{run_script, ExitStatus, OperatorScript};
use teleimp_gateway::server::{serve_on, ServeConfig};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, name: &'static str, pass: bool, detail: String) {
    let line = Line { name, pass, detail };
    let mut err = std::io::stderr().lock();
    writeln!(
        err,
        "{} {}: {}",
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.detail
    )
    .unwrap();
    lines.push(line);
}

fn damping_closure() -> (bool, String) {
    let profile = ImpedanceProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1_000_000 {
        let kt = rng.random_range(profile.k_t_min..=profile.k_t_max);
        let kr = rng.random_range(profile.k_r_min..=profile.k_r_max);
        let k = [kt, kt, kt, kr, kr, kr];
        let d = damping_from_stiffness(&k).unwrap();
        for (ki, di) in k.iter().zip(d) {
            worst = worst.max((di - 2.0 * 0.707 * ki.sqrt()).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-9 && secs < 5.0,
        format!("max |d - 1.414 sqrt(k)| = {worst:.2e} over 10^6 samples in {secs:.2} s"),
    )
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let p = Vector3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.15..0.15),
        rng.random_range(0.2..0.45),
    );
    let v = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    Pose::new(p, exp_rotation(&v))
}

fn trackable_pose(rng: &mut ChaCha8Rng, geom: &PolyhedronGeometry, cfg: &TrackerConfig) -> Pose {
    loop {
        let pose = random_pose(rng);
        let obs = synth_observe(&pose, geom, cfg, &NoiseSpec::noiseless(), 0.0, 0);
        if obs
            .iter()
            .any(|o| cosine_weight(o).unwrap() > cfg.alpha_thr)
        {
            return pose;
        }
    }
}

fn fusion_round_trip() -> (bool, String) {
    let geom = PolyhedronGeometry::default_cube();
    let cfg = TrackerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let (mut wp, mut wr) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let truth = trackable_pose(&mut rng, &geom, &cfg);
        let obs = synth_observe(&truth, &geom, &cfg, &NoiseSpec::noiseless(), 0.0, i);
        let (dp, dr) = fuse(&obs, &geom, &cfg)
            .unwrap()
            .pose_world
            .distance_to(&truth);
        wp = wp.max(dp);
        wr = wr.max(dr);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        wp <= 1e-9 && wr <= 1e-9 && secs < 5.0,
        format!("200 poses, max error {wp:.2e} m / {wr:.2e} rad in {secs:.3} s"),
    )
}

fn gating() -> (bool, String) {
    let geom = PolyhedronGeometry::default_cube();
    let cfg = TrackerConfig::default();
    let noise = NoiseSpec {
        pos_sigma: 0.001,
        rot_sigma: 0.5f64.to_radians(),
        ..NoiseSpec::noiseless()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut pairs, mut differ) = (0, 0);
    for seed in 0..1000 {
        let truth = trackable_pose(&mut rng, &geom, &cfg);
        let obs = synth_observe(&truth, &geom, &cfg, &noise, 0.0, seed);
        let gated: Vec<_> = obs
            .iter()
            .filter(|o| cosine_weight(o).unwrap() <= cfg.alpha_thr)
            .collect();
        if gated.is_empty() || gated.len() == obs.len() {
            continue;
        }
        pairs += 1;
        let corrupted: Vec<MarkerObservation> = obs
            .iter()
            .map(|o| {
                if cosine_weight(o).unwrap() <= cfg.alpha_thr {
                    MarkerObservation {
                        pose_camera: Pose::new(
                            o.pose_camera.position * 1.5,
                            o.pose_camera.orientation * exp_rotation(&Vector3::new(0.0, 0.0, 1.0)),
                        ),
                        ..*o
                    }
                } else {
                    *o
                }
            })
            .collect();
        let a = fuse(&obs, &geom, &cfg).unwrap().pose_world;
        let b = fuse(&corrupted, &geom, &cfg).unwrap().pose_world;
        if a != b {
            differ += 1;
        }
    }
    (
        differ == 0 && pairs > 100,
        format!("{differ} of {pairs} paired runs differ after corrupting gated faces"),
    )
}

fn noise_robustness() -> (bool, String) {
    let geom = PolyhedronGeometry::default_cube();
    let cfg = TrackerConfig::default();
    let noise = NoiseSpec {
        pos_sigma: 0.001,
        rot_sigma: 0.5f64.to_radians(),
        ..NoiseSpec::noiseless()
    };
    let home = Pose::from_translation(0.0, 0.0, 0.3);
    let mut sum = 0.0;
    for seed in 0..1000 {
        let obs = synth_observe(&home, &geom, &cfg, &noise, 0.0, seed);
        sum +=
            (fuse(&obs, &geom, &cfg).unwrap().pose_world.position - home.position).norm_squared();
    }
    let rms_3d = (sum / 1000.0).sqrt();
    let rmse = rms_3d / 3f64.sqrt();

    let mut differ = 0;
    let mut flipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for (base, band_hi) in [
        (NoiseSpec::noiseless(), cfg.alpha_thr),
        (noise, cfg.alpha_thr - 0.05),
    ] {
        let flipping = NoiseSpec {
            flip_probability: 1.0,
            flip_alpha_band: (0.0, band_hi),
            ..base
        };
        for seed in 0..1000 {
            let truth = random_pose(&mut rng);
            let a = synth_observe(&truth, &geom, &cfg, &base, 0.0, seed);
            let b = synth_observe(&truth, &geom, &cfg, &flipping, 0.0, seed);
            flipped += a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x.pose_camera != y.pose_camera)
                .count();
            if fuse(&a, &geom, &cfg).map(|p| p.pose_world)
                != fuse(&b, &geom, &cfg).map(|p| p.pose_world)
            {
                differ += 1;
            }
        }
    }
    (
        rmse < 1e-3 && differ == 0 && flipped > 0,
        format!(
            "RMSE {:.3} mm per axis ({:.3} mm 3-D) over 1000 seeds; {flipped} flipped faces, {differ} paired differences",
            rmse * 1e3,
            rms_3d * 1e3
        ),
    )
}

fn chordal_cost(q: &UnitQuaternion<f64>, qs: &[UnitQuaternion<f64>], ws: &[f64]) -> f64 {
    qs.iter()
        .zip(ws)
        .map(|(qi, w)| {
            let (a, b) = (qi.quaternion(), q.quaternion());
            w * (a - b).norm_squared().min((a + b).norm_squared())
        })
        .sum()
}

fn compass_search(qs: &[UnitQuaternion<f64>], ws: &[f64]) -> UnitQuaternion<f64> {
    let mut best = qs[0];
    let mut cost = chordal_cost(&best, qs, ws);
    let mut step = 0.5;
    while step > 1e-12 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut v = Vector3::zeros();
                v[axis] = sign * step;
                let cand = exp_rotation(&v) * best;
                let c = chordal_cost(&cand, qs, ws);
                if c < cost {
                    (best, cost, improved) = (cand, c, true);
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

fn rotation_mean() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    let trials = 500;
    for _ in 0..trials {
        let center = exp_rotation(&Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ));
        let n = rng.random_range(1..=4);
        let (mut qs, mut ws) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let q = exp_rotation(&(axis * rng.random_range(0.0..60f64.to_radians()))) * center;
            qs.push(if rng.random::<bool>() {
                q
            } else {
                UnitQuaternion::new_unchecked(-q.into_inner())
            });
            ws.push(rng.random_range(0.05..1.0));
        }
        let poses: Vec<Pose> = qs.iter().map(|q| Pose::from_rotation(*q)).collect();
        let mean = weighted_pose_mean(&poses, &ws).unwrap().orientation;
        worst = worst.max(geodesic_angle(&mean, &compass_search(&qs, &ws)));
    }
    (worst <= 1e-6, format!("{trials} sets of 1-4 quaternions within 60 deg: max gap to brute force {worst:.2e} rad"))
}

fn steady_sag(k_t: f64) -> f64 {
    let scene = SceneConfig::default();
    let grasp = scene
        .peg_start_pose
        .transform_point(&scene.grasp_point_local());
    let cfg = SimConfig {
        ee_start: Pose::new(grasp, UnitQuaternion::identity()),
        ..SimConfig::default()
    };
    let profile = ImpedanceProfile::default();
    let mut world = World::new(cfg, scene, 0).unwrap();
    world
        .step(&Commands {
            goal: cfg.ee_start,
            impedance: expand(2000.0, 150.0, &profile).unwrap(),
            gripper: GripperState::Closed,
        })
        .unwrap();
    let lift = grasp + Vector3::new(0.0, 0.0, 0.3);
    let cmd = Commands {
        goal: Pose::new(lift, UnitQuaternion::identity()),
        impedance: expand(k_t, 150.0, &profile).unwrap(),
        gripper: GripperState::Closed,
    };
    for _ in 0..15_000 {
        world.step(&cmd).unwrap();
    }
    lift.z - world.ee().pose.position.z
}

fn spring_sag() -> (bool, String) {
    let mg = 0.5 * 9.81;
    let mut pass = true;
    let mut parts = Vec::new();
    for k_t in [100.0, 2000.0] {
        let sag = steady_sag(k_t);
        let expected = mg / k_t;
        let rel = (sag - expected).abs() / expected;
        pass &= rel <= 0.02;
        parts.push(format!(
            "k_t {k_t}: {:.4} m vs {:.4} m ({:.2}%)",
            sag,
            expected,
            rel * 100.0
        ));
    }
    (pass, parts.join(", "))
}

fn bundled() -> (Scenario, OperatorScript) {
    (
        Scenario::from_toml_str(BUNDLED_SCENARIO).unwrap(),
        OperatorScript::read(BUNDLED_SCRIPT.as_bytes()).unwrap(),
    )
}

fn scripted_peg_in_hole(dir: &std::path::Path) -> (bool, String) {
    let (scenario, script) = bundled();
    let path = dir.join("bundled.jsonl");
    let start = Instant::now();
    let out = run_script(
        &script,
        &scenario,
        Box::new(std::fs::File::create(&path).unwrap()),
    )
    .unwrap();
    let wall = start.elapsed().as_secs_f64();
    let episode = read_episode_file(&path).unwrap();
    let reqs = check_requirements(&episode.records, &scenario.requirements);
    let g = out.final_status.geometry;
    (
        out.status == ExitStatus::Success && out.sim_time < 60.0 && wall < 30.0 && reqs.all_satisfied(),
        format!(
            "{:?} at {:.3} s sim / {:.2} s wall, depth {:.1} mm, offset {:.2} mm, tilt {:.2} deg, requirements {}/4",
            out.status,
            out.sim_time,
            wall,
            g.depth * 1e3,
            g.lateral_offset * 1e3,
            g.tilt.to_degrees(),
            reqs.results.iter().filter(|r| r.verdict == teleimp_core::session::Verdict::Satisfied).count()
        ),
    )
}

fn determinism(dir: &std::path::Path) -> (bool, String) {
    let (scenario, script) = bundled();
    let (a, b) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    let out = run_script(
        &script,
        &scenario,
        Box::new(std::fs::File::create(&a).unwrap()),
    )
    .unwrap();
    run_script(
        &script,
        &scenario,
        Box::new(std::fs::File::create(&b).unwrap()),
    )
    .unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let divergence = replay(&read_episode_file(&a).unwrap(), &scenario)
        .unwrap()
        .max_position_divergence;
    let mut fine = scenario;
    fine.sim.dt /= 2.0;
    let halved = run_script(&script, &fine, Box::new(std::io::sink())).unwrap();
    let (dp, _) = out.final_peg.distance_to(&halved.final_peg);
    (
        identical && divergence < 1e-9 && dp < 1e-3,
        format!("byte-identical {identical}, replay divergence {divergence:.2e} m, dt/2 peg shift {:.3} mm", dp * 1e3),
    )
}

fn bumpless_clutch() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    let mut engages = 0;
    let leader = |rng: &mut ChaCha8Rng| {
        Pose::new(
            Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..0.6),
            ),
            exp_rotation(&Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            )),
        )
    };
    for _ in 0..500 {
        let mut tp = TeleopPipeline::new(
            TeleopConfig::default(),
            Pose::from_translation(0.3, 0.0, 0.3),
        );
        let mut now = leader(&mut rng);
        for step in 0..40 {
            if rng.random_range(0..3) == 0 {
                let before = tp.goal();
                let tracked = TrackedPose {
                    pose_world: now,
                    weight_sum: 1.0,
                    n_used: 1,
                    stale: false,
                    timestamp: f64::from(step),
                };
                if tp.toggle_teleop(Some(&tracked)).unwrap() {
                    engages += 1;
                    tp.update(&now);
                    let (dp, dr) = tp.goal().distance_to(&before);
                    worst = worst.max(dp).max(dr);
                }
            } else {
                now = leader(&mut rng);
                tp.update(&now);
            }
        }
    }
    (
        worst <= 1e-9,
        format!("{engages} re-engagements, max goal jump {worst:.2e}"),
    )
}

fn random_client(rng: &mut ChaCha8Rng) -> ClientMessage {
    match rng.random_range(0..5) {
        0 => {
            let q = exp_rotation(&Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ));
            ClientMessage::PoseSample {
                t: rng.random_range(0.0..1e4),
                p: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                q: [q.w, q.i, q.j, q.k],
            }
        }
        1 => ClientMessage::Fsr {
            t: rng.random_range(0.0..1e4),
            pt: rng.random_range(0.0..=1.0),
            pr: rng.random_range(0.0..=1.0),
        },
        2 => ClientMessage::GripperToggle,
        3 => ClientMessage::TeleopToggle,
        _ => ClientMessage::ScaleSet {
            s: rng.random_range(0.1..=2.0),
        },
    }
}

async fn malformed_against_live_server(dir: &std::path::Path) -> Result<usize, String> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| e.to_string())?;
    let addr = listener.local_addr().unwrap();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(
        listener,
        ServeConfig::new(Scenario::default(), dir.to_path_buf()),
        async {
            let _ = stop_rx.await;
        },
    ));
    let frames = [
        "{",
        "}",
        "[]",
        "null",
        "42",
        "\"text\"",
        r#"{"type":"warp"}"#,
        r#"{"type":"fsr"}"#,
        r#"{"type":"fsr","t":"x","pt":0,"pr":0}"#,
        r#"{"type":"pose_sample","t":0,"p":[0,0],"q":[1,0,0,0]}"#,
        r#"{"type":"pose_sample","t":0,"p":[0,0,0],"q":[0,0,0,0]}"#,
        r#"{"type":"scale_set","s":1e999}"#,
        r#"{"type":"scale_set"}"#,
        "\u{0}\u{1}\u{2}",
        "{\"type\":\"fsr\",\"t\":1,\"pt\":0.5,\"pr\":",
    ];
    let stream = tokio::net::TcpStream::connect(addr)
        .await
        .map_err(|e| e.to_string())?;
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    let mut payload = String::new();
    for _ in 0..20 {
        for f in frames {
            payload.push_str(f);
            payload.push('\n');
        }
    }
    w.write_all(payload.as_bytes())
        .await
        .map_err(|e| e.to_string())?;
    w.write_all(b"\xff\xfe\n")
        .await
        .map_err(|e| e.to_string())?;
    w.write_all(format!("{}\n", encode(&ClientMessage::ScaleSet { s: 0.75 })).as_bytes())
        .await
        .map_err(|e| e.to_string())?;
    let expected = frames.len() * 20 + 1;
    let mut parse_errors = 0;
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if Instant::now() > deadline {
            return Err("timed out waiting for the server".into());
        }
        let line = tokio::time::timeout(Duration::from_secs(5), lines.next_line())
            .await
            .map_err(|_| "server went quiet".to_string())?
            .map_err(|e| e.to_string())?
            .ok_or("server closed the connection")?;
        match decode_server(&line).map_err(|e| e.to_string())? {
            ServerMessage::Error { .. } => parse_errors += 1,
            ServerMessage::Telemetry(t) if t.scale == 0.75 => break,
            _ => {}
        }
    }
    drop(w);
    stop_tx.send(()).ok();
    server
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    if parse_errors != expected {
        return Err(format!(
            "{parse_errors} parse errors for {expected} malformed frames"
        ));
    }
    Ok(expected)
}

fn protocol(dir: &std::path::Path) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let m = random_client(&mut rng);
        match decode_client(&encode(&m)) {
            Ok(d) if d.msg == m && !d.clamped() => {}
            _ => mismatches += 1,
        }
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let live = rt.block_on(malformed_against_live_server(dir));
    let detail = match &live {
        Ok(n) => format!("{n} malformed frames answered with parse errors, session kept"),
        Err(e) => e.clone(),
    };
    (
        mismatches == 0 && live.is_ok(),
        format!("{mismatches} round-trip mismatches in 10^5 messages; {detail}"),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let (p, d) = damping_closure();
    report(&mut lines, "damping closure", p, d);
    let (p, d) = fusion_round_trip();
    report(&mut lines, "fusion round-trip", p, d);
    let (p, d) = gating();
    report(&mut lines, "cosine gating", p, d);
    let (p, d) = noise_robustness();
    report(&mut lines, "noise robustness", p, d);
    let (p, d) = rotation_mean();
    report(&mut lines, "rotation mean oracle", p, d);
    let (p, d) = spring_sag();
    report(&mut lines, "spring sag", p, d);
    let (p, d) = scripted_peg_in_hole(dir.path());
    report(&mut lines, "scripted peg-in-hole", p, d);
    let (p, d) = determinism(dir.path());
    report(&mut lines, "determinism and replay", p, d);
    let (p, d) = bumpless_clutch();
    report(&mut lines, "bumpless clutch", p, d);
    let (p, d) = protocol(dir.path());
    report(&mut lines, "protocol", p, d);

    let failed: Vec<_> = lines.iter().filter(|l| !l.pass).map(|l| l.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

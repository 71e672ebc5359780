//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs with `cargo test --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use se3track::camera::CameraIntrinsics;
use se3track::geometry::{exp_se3, exp_so3, log_se3, transform_point};
use se3track::image::RgbdImage;
use se3track::mesh::{sample_surface, TriangleMesh};
use se3track::metrics::{add_metric, adds_metric, auc, ModelPoints, ADDS_BRUTE_FORCE_LIMIT};
use se3track::nn::{self, grad_check, LossWeights, NetEstimator, Network, NetworkSpec, Sample, TrainConfig};
use se3track::rng::stream_rng;
use se3track::synth::{
    corner_view_pose, generate_pair, generate_sequence, random_walk, sample_camera_pose, sample_perturbation,
    sample_unit_vector, settle_scene, PerturbationParams, SceneObject, SequenceConfig, SynthConfig, CAMERA_RADIUS_MAX,
    CAMERA_RADIUS_MIN,
};
use se3track::tracker::{
    point_to_plane_jacobian, GaussNewtonConfig, GroundTruthEstimator, IcpEstimator, TrackState, Tracker,
    DEFAULT_CROP_SIZE,
};
use se3track::{Mat3, Pose, Twist, Vec3};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn frobenius(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            s += (a.m[r][c] - b.m[r][c]).powi(2);
        }
    }
    s.sqrt()
}

fn random_twist(rng: &mut impl Rng, max_angle: f64) -> Twist {
    let mut r = stream_rng(rng.gen(), 0);
    let w = sample_unit_vector(&mut r) * rng.gen_range(0.0..max_angle);
    let t = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Twist::new(t, w)
}

fn lie_group() -> Outcome {
    let mut rng = stream_rng(101, 0);
    let (mut round_trip, mut orth) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let xi = random_twist(&mut rng, std::f64::consts::PI - 1e-3);
        let pose = exp_se3(&xi);
        let back = log_se3(&pose).expect("log of a valid pose");
        let d = back.to_array().iter().zip(xi.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        round_trip = round_trip.max(d).max(exp_se3(&back).max_abs_diff(&pose));
        let r = exp_so3(xi.w);
        orth = orth.max(r.orthogonality_error()).max((r.determinant() - 1.0).abs());
    }
    let mut continuity = true;
    let mut worst_ratio = 0.0f64;
    for eps in [1e-3, 1e-5, 1e-7] {
        for _ in 0..1000 {
            let mut r = stream_rng(rng.gen(), 0);
            let u = sample_unit_vector(&mut r);
            let linear = Mat3::from_rows([
                [1.0, -eps * u.z, eps * u.y],
                [eps * u.z, 1.0, -eps * u.x],
                [-eps * u.y, eps * u.x, 1.0],
            ]);
            let err = frobenius(&exp_so3(u * eps), &linear);
            worst_ratio = worst_ratio.max(err / (eps * eps));
            continuity &= err <= eps * eps;
        }
    }
    outcome(
        round_trip < 1e-9 && orth < 1e-9 && continuity,
        format!("round trip {round_trip:.2e} < 1e-9, orthonormality {orth:.2e} < 1e-9, continuity max err/eps^2 {worst_ratio:.3} <= 1"),
    )
}

fn oracle_closure() -> Outcome {
    let mesh = TriangleMesh::cube(0.1);
    let k = CameraIntrinsics::default();
    let cfg = SequenceConfig { frames: 200, ..Default::default() };
    let poses = random_walk(&corner_view_pose(cfg.distance), &cfg, &mut stream_rng(102, 0)).expect("walk");
    let tracker = Tracker::new(&mesh, k, 32).expect("tracker");
    let oracle = GroundTruthEstimator { poses: poses.clone() };
    let blank = RgbdImage::new(k.width, k.height);
    let traj = tracker.track_sequence(poses[0], std::iter::repeat(&blank).take(poses.len()), &oracle);
    let err = traj.poses.iter().zip(&poses).map(|(p, g)| p.max_abs_diff(g)).fold(0.0, f64::max);
    let lost = traj.lost_flags().iter().any(|l| *l);
    outcome(err < 1e-9 && !lost && traj.poses.len() == 200, format!("200 frames, max per-frame pose error {err:.2e} < 1e-9"))
}

fn jacobian_fidelity() -> Outcome {
    let mut rng = stream_rng(103, 0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut r = stream_rng(rng.gen(), 0);
        let p = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.4..1.2));
        let n = sample_unit_vector(&mut r);
        let q = p + Vec3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
        let residual = |xi: [f64; 6]| n.dot(transform_point(&exp_se3(&Twist::from_array(xi)), p) - q);
        let analytic = point_to_plane_jacobian(p, n);
        for i in 0..6 {
            let (mut plus, mut minus) = ([0.0; 6], [0.0; 6]);
            plus[i] = h;
            minus[i] = -h;
            let numeric = (residual(plus) - residual(minus)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-6, format!("100 configurations, max relative error {worst:.2e} < 1e-6"))
}

fn icp_auc(noise: f64, seed: u64) -> (f64, usize) {
    let mesh = TriangleMesh::cube(0.1);
    let k = CameraIntrinsics::default();
    let cfg = SequenceConfig { frames: 100, depth_noise_sigma: noise, ..Default::default() };
    let seq = generate_sequence(&mesh, &k, &cfg, seed).expect("sequence");
    let tracker = Tracker::new(&mesh, k, DEFAULT_CROP_SIZE).expect("tracker");
    let icp = IcpEstimator::new(&mesh, GaussNewtonConfig::default()).expect("icp");
    let traj = tracker.track_sequence(seq.poses[0], &seq.frames, &icp);
    let model = ModelPoints::new(mesh.vertices.clone()).expect("model");
    let lost = traj.lost_flags();
    let errs: Vec<f64> = traj
        .poses
        .iter()
        .zip(&seq.poses)
        .zip(&lost)
        .map(|((p, g), l)| if *l { f64::INFINITY } else { add_metric(&model, g, p) })
        .collect();
    (auc(&errs, 0.02).expect("auc"), lost.iter().filter(|l| **l).count())
}

fn tracking_benchmark() -> Outcome {
    let (clean, lost_clean) = icp_auc(0.0, 4);
    let (noisy, lost_noisy) = icp_auc(0.002, 3);
    outcome(
        clean >= 0.95 && noisy >= 0.85,
        format!("ADD AUC(0.02) clean {clean:.4} >= 0.95 ({lost_clean} lost), 2 mm noise {noisy:.4} >= 0.85 ({lost_noisy} lost)"),
    )
}

fn sampler_statistics() -> Outcome {
    let p = PerturbationParams::default();
    let mut rng = stream_rng(105, 0);
    let n = 1_000_000;
    let (mut st, mut sw) = (0.0, 0.0);
    for _ in 0..n {
        let xi = sample_perturbation(&p, &mut rng);
        st += xi.t.norm();
        sw += xi.w.norm();
    }
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let rel_t = (st / n as f64 / (p.sigma_t * c) - 1.0).abs();
    let rel_w = (sw / n as f64 / (p.sigma_w * c) - 1.0).abs();
    let mut cam_rng = stream_rng(105, 1);
    let (mut rmin, mut rmax) = (f64::INFINITY, 0.0f64);
    for _ in 0..100_000 {
        let r = sample_camera_pose(&mut cam_rng).translation.norm();
        rmin = rmin.min(r);
        rmax = rmax.max(r);
    }
    let radii_ok = rmin >= CAMERA_RADIUS_MIN && rmax <= CAMERA_RADIUS_MAX;
    outcome(
        rel_t < 0.01 && rel_w < 0.01 && radii_ok,
        format!("mean |t| rel err {rel_t:.2e} < 1e-2, mean |w| rel err {rel_w:.2e} < 1e-2, radii [{rmin:.4}, {rmax:.4}] within [0.6, 1.3]"),
    )
}

fn ppdr_postcondition() -> Outcome {
    let mut rng = stream_rng(106, 0);
    let meshes: Vec<TriangleMesh> = [0.04, 0.06, 0.08, 0.1, 0.12, 0.05].iter().map(|s| TriangleMesh::cube(*s)).collect();
    let (mut worst_pen, mut worst_below) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let objs: Vec<SceneObject> = meshes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let t = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.4));
                let mut r = stream_rng(rng.gen(), 0);
                let pose = Pose::new(exp_so3(sample_unit_vector(&mut r) * rng.gen_range(0.0..3.0)), t);
                SceneObject::new(i, m, pose).expect("object")
            })
            .collect();
        let out = settle_scene(&objs, 0.0, &mut rng).expect("settle");
        for i in 0..out.len() {
            worst_below = worst_below.max(-(out[i].pose.translation.z - out[i].bounding_radius));
            for j in i + 1..out.len() {
                let d = (out[i].pose.translation - out[j].pose.translation).norm();
                worst_pen = worst_pen.max(out[i].bounding_radius + out[j].bounding_radius - d);
            }
        }
    }
    outcome(
        worst_pen <= 0.0 && worst_below <= 1e-9,
        format!("100 scenes x 6 objects, max penetration {worst_pen:.2e} <= 0, max depth below table {worst_below:.2e} <= 1e-9"),
    )
}

fn gradient_check() -> Outcome {
    let spec = NetworkSpec { input_size: 8, ..Default::default() };
    let net = Network::<f64>::init(&spec, 107).expect("net");
    let mut rng = stream_rng(107, 1);
    let n = spec.input_len();
    let input = nn::NetInput {
        prev: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        cur: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let target = Twist::from_array(std::array::from_fn(|_| rng.gen_range(-0.1..0.1)));
    let r = grad_check(&net, &[Sample::new(input, &target)], &LossWeights::default(), 1e-4).expect("grad check");
    outcome(
        r.max_relative_error < 1e-4,
        format!(
            "{} weights checked, max relative error {:.2e} < 1e-4, {} ReLU-kink weights excluded",
            r.checked, r.max_relative_error, r.excluded_kinks
        ),
    )
}

fn overfit_closure() -> Outcome {
    let mesh = TriangleMesh::cube(0.1);
    let k = CameraIntrinsics::default();
    let synth = SynthConfig::default();
    let pairs: Vec<_> = (0..64).map(|i| generate_pair(&mesh, &k, &synth, 108, i).expect("pair")).collect();
    let spec = NetworkSpec::default();
    let data: Vec<Sample<f32>> = pairs
        .iter()
        .map(|g| Sample::new(nn::prepare_input(&g.pair.img_prev, &g.pair.img_cur, &spec), &g.pair.gt_twist))
        .collect();
    let mut net = Network::<f32>::init(&spec, 108).expect("net");
    let cfg = TrainConfig { epochs: 800, batch_size: 8, lr: 1e-3, lr_milestones: vec![500, 700], seed: 108, ..Default::default() };
    let report = nn::train(&mut net, &data, &cfg).expect("train");
    let final_loss = *report.loss_history.last().unwrap_or(&f64::INFINITY);
    let est = NetEstimator { net };
    let tracker = Tracker::new(&mesh, k, synth.crop_size).expect("tracker");
    let model = ModelPoints::new(sample_surface(&mesh, 1000, 108).expect("samples").iter().map(|s| s.position).collect()).expect("model");
    let mut improved = 0;
    let mut reductions = Vec::new();
    for g in &pairs {
        let state = tracker.track_frame(&TrackState::new(g.pose_prev), &g.observation, &est);
        let before = add_metric(&model, &g.pose_true, &g.pose_prev);
        let after = if state.lost { f64::INFINITY } else { add_metric(&model, &g.pose_true, &state.pose) };
        let reduction = 1.0 - after / before;
        reductions.push(reduction);
        if reduction >= 0.9 {
            improved += 1;
        }
    }
    reductions.sort_by(f64::total_cmp);
    let frac = improved as f64 / pairs.len() as f64;
    outcome(
        final_loss < 1e-3 && frac >= 0.9,
        format!(
            "final loss {final_loss:.2e} < 1e-3, ADD reduced >= 90% on {:.1}% of pairs >= 90% (median reduction {:.4})",
            100.0 * frac,
            reductions[reductions.len() / 2]
        ),
    )
}

fn metrics_oracles() -> Outcome {
    let mut rng = stream_rng(109, 0);
    let pts: Vec<Vec3> = (0..500).map(|_| Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05))).collect();
    let model = ModelPoints::new(pts.clone()).expect("model");
    let mut adds_le_add = true;
    for _ in 0..1000 {
        let a = exp_se3(&random_twist(&mut rng, 1.0));
        let b = exp_se3(&random_twist(&mut rng, 1.0));
        adds_le_add &= adds_metric(&model, &a, &b) <= add_metric(&model, &a, &b);
    }
    let big: Vec<Vec3> = (0..ADDS_BRUTE_FORCE_LIMIT + 1000)
        .map(|_| Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)))
        .collect();
    let big_model = ModelPoints::new(big.clone()).expect("model");
    let (gt, est) = (exp_se3(&random_twist(&mut rng, 0.5)), exp_se3(&random_twist(&mut rng, 0.5)));
    let gt_pts: Vec<Vec3> = big.iter().map(|&x| gt.transform_point(x)).collect();
    let est_pts: Vec<Vec3> = big.iter().map(|&x| est.transform_point(x)).collect();
    let brute = gt_pts
        .iter()
        .map(|q| est_pts.iter().map(|p| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / big.len() as f64;
    let brute_err = (adds_metric(&big_model, &gt, &est) - brute).abs();
    let errors: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..0.15)).collect();
    let d_max = 0.1;
    let closed = auc(&errors, d_max).expect("auc");
    let steps = 100_000;
    let acc = |tau: f64| errors.iter().filter(|e| **e <= tau).count() as f64 / errors.len() as f64;
    let mut trap = 0.0;
    let mut prev = acc(0.0);
    for i in 1..=steps {
        let cur = acc(d_max * i as f64 / steps as f64);
        trap += 0.5 * (prev + cur) / steps as f64;
        prev = cur;
    }
    let auc_err = (closed - trap).abs();
    let shift = Pose::from_translation(Vec3::new(0.03, 0.04, 0.0));
    let add = add_metric(&model, &Pose::identity(), &shift);
    outcome(
        adds_le_add && brute_err < 1e-12 && auc_err < 1e-4 && add == 0.05,
        format!(
            "ADD-S <= ADD on 1000 pairs: {adds_le_add}, ADD-S vs brute force {brute_err:.1e} (m = {}), AUC vs trapezoid {auc_err:.2e} < 1e-4, ADD of (0.03, 0.04, 0) = {add}",
            big.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_se3track")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline_once(root: &Path) -> Result<Vec<u8>, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    run_cli(&["gen-data", "--out", &p("data"), "--count", "16", "--seed", "110"])?;
    run_cli(&["train", "--data", &p("data"), "--out", &p("w.bin"), "--epochs", "50"])?;
    run_cli(&["gen-seq", "--out", &p("seq"), "--frames", "20", "--seed", "110"])?;
    run_cli(&[
        "track", "--seq", &p("seq"), "--mesh", &p("seq/model.obj"), "--init-pose", &p("seq/000000_gt.txt"),
        "--estimator", "net", "--weights", &p("w.bin"), "--out", &p("trk"),
    ])?;
    run_cli(&["eval", "--pred", &p("trk"), "--gt", &p("seq"), "--mesh", &p("seq/model.obj"), "--out", &p("report.json")])?;
    std::fs::read(root.join("report.json")).map_err(|e| e.to_string())
}

fn pipeline_smoke() -> Outcome {
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    let runs: Result<Vec<Vec<u8>>, String> = dirs.iter().map(|d| pipeline_once(d.path())).collect();
    match runs {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let parsed: Result<serde_json::Value, _> = serde_json::from_slice(&r[0]);
            let valid = parsed.as_ref().is_ok_and(|v| v["frames"] == 20 && v["auc_add"].is_number());
            outcome(valid && r[0] == r[1], format!("report valid: {valid}, bit-identical across two runs: {}", r[0] == r[1]))
        }
    }
}

fn main() {
    type Criterion = (u32, &'static str, Option<f64>, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "Lie-group suite", Some(5.0), lie_group),
        (2, "manifold-update oracle closure", Some(5.0), oracle_closure),
        (3, "Jacobian fidelity", None, jacobian_fidelity),
        (4, "synthetic tracking benchmark", Some(60.0), tracking_benchmark),
        (5, "sampler statistics", Some(10.0), sampler_statistics),
        (6, "PPDR postcondition", None, ppdr_postcondition),
        (7, "gradient check", Some(30.0), gradient_check),
        (8, "overfit closure", Some(300.0), overfit_closure),
        (9, "metrics oracles", None, metrics_oracles),
        (10, "pipeline smoke test", Some(180.0), pipeline_smoke),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = result.pass && in_time;
        let budget = limit.map_or(String::new(), |l| format!(" < {l:.0} s"));
        println!("[{}] #{id} {name}: {}; runtime {secs:.1} s{budget}", if pass { "PASS" } else { "FAIL" }, result.detail);
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero when any fails. Run alone with `cargo test -p viro-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::SMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viro_core::harness::montecarlo::{monte_carlo, summarize, SeedResult};
use viro_core::harness::report::{init_report_csv, nees_csv, sigma_bounds_csv, trajectory_csv};
use viro_core::harness::{evaluate, run_pipeline, Mode, RunConfig};
use viro_core::mathx::{so3_exp, Vec3};
use viro_core::observability::{build_observability_matrix, Linearization, ObsConfig, ObsScene};
use viro_core::ranging::{echo_jacobians, ranging_node, squared_range_jacobians, UwbParams};
use viro_core::sim::{simulate, SimConfig, TrajectorySpec};
use viro_core::state::Pose;
use viro_core::vision::Camera;

const MC_SEEDS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn trajectories() -> [TrajectorySpec; 3] {
    [TrajectorySpec::figure_eight(), TrajectorySpec::circle(), TrajectorySpec::random_waypoints()]
}

fn within(t: Duration, limit: f64) -> bool {
    t.as_secs_f64() < limit
}

fn observability(mode: Linearization) -> Outcome {
    let start = Instant::now();
    let cfg = ObsConfig::default();
    let mut pass = true;
    let mut detail = Vec::new();
    for t in trajectories() {
        let sim = SimConfig { trajectory: t.clone(), ..SimConfig::default() };
        let scene = ObsScene::new(&sim, &cfg).expect("scene");
        let r = build_observability_matrix(&scene, mode, &cfg).expect("observability matrix");
        let ok = match mode {
            Linearization::Ideal => r.residuals.iter().all(|&x| x < 1e-8) && r.rank == 20,
            Linearization::Actual => r.residuals[..3].iter().all(|&x| x < 1e-8) && r.residuals[3] > 1e-3 && r.rank == 21,
            Linearization::Fej => r.residuals.iter().all(|&x| x < 1e-8),
        };
        pass &= ok;
        detail.push(format!(
            "{} rank {} res [{:.1e} {:.1e} {:.1e} {:.1e}]",
            t.name(),
            r.rank,
            r.residuals[0],
            r.residuals[1],
            r.residuals[2],
            r.residuals[3]
        ));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 10.0);
    Outcome { pass, detail: format!("{}; {:.2} s", detail.join("; "), elapsed.as_secs_f64()) }
}

fn perturbed(pose: &Pose, d: &[f64; 6]) -> Pose {
    let rot = so3_exp(&-Vec3::new(d[0], d[1], d[2])) * pose.rot();
    Pose::new(&rot, pose.p + Vec3::new(d[3], d[4], d[5]))
}

/// Central differences of `f` over the orientation/position error of `pose`.
fn fd_pose<const R: usize>(pose: &Pose, f: impl Fn(&Pose) -> SMatrix<f64, R, 1>) -> SMatrix<f64, R, 6> {
    let h = 1e-6;
    let mut j = SMatrix::<f64, R, 6>::zeros();
    for k in 0..6 {
        let mut d = [0.0; 6];
        d[k] = h;
        let plus = f(&perturbed(pose, &d));
        d[k] = -h;
        let minus = f(&perturbed(pose, &d));
        j.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    j
}

fn fd_point<const R: usize>(p: &Vec3, f: impl Fn(&Vec3) -> SMatrix<f64, R, 1>) -> SMatrix<f64, R, 3> {
    let h = 1e-6;
    let mut j = SMatrix::<f64, R, 3>::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        j.set_column(k, &((f(&(p + e)) - f(&(p - e))) / (2.0 * h)));
    }
    j
}

fn rel<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1.0)
}

fn jacobians() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let uwb = UwbParams::default();
    let cam = Camera::default();
    let (mut worst_range, mut worst_echo, mut worst_visual) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    while n < 1000 {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = so3_exp(&(axis * rng.random_range(0.0..3.0)));
        let pose = Pose::new(&rot, Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)));
        let anchor = Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-1.0..4.0));
        let other = Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-1.0..4.0));
        // Feature in front of the camera.
        let depth = rng.random_range(1.0..15.0);
        let bearing = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5), 1.0);
        let p_cam = bearing * depth;
        let p_imu = cam.r_ci.transpose() * p_cam + cam.p_ic;
        let feature = pose.rot().transpose() * p_imu + pose.p;

        let (Some(jr), Some((je_i, je_j)), Ok(jv)) =
            (squared_range_jacobians(&pose, &anchor, &uwb), echo_jacobians(&anchor, &other), cam.jacobians(&pose, &feature))
        else {
            continue;
        };
        n += 1;

        let d2 = |p: &Pose, a: &Vec3| SMatrix::<f64, 1, 1>::new((ranging_node(p, &uwb) - a).norm_squared());
        let fd = fd_pose(&pose, |p| d2(p, &anchor));
        let fa = fd_point(&anchor, |a| d2(&pose, a));
        let mut an = SMatrix::<f64, 1, 6>::zeros();
        an.fixed_view_mut::<1, 3>(0, 0).copy_from(&jr.theta);
        an.fixed_view_mut::<1, 3>(0, 3).copy_from(&jr.pos);
        worst_range = worst_range.max(rel(&an, &fd)).max(rel(&jr.anchor, &fa));

        let e2 = |a: &Vec3, b: &Vec3| SMatrix::<f64, 1, 1>::new((a - b).norm_squared());
        let fi = fd_point(&anchor, |a| e2(a, &other));
        let fj = fd_point(&other, |b| e2(&anchor, b));
        worst_echo = worst_echo.max(rel(&je_i, &fi)).max(rel(&je_j, &fj));

        let proj = |p: &Pose, f: &Vec3| cam.project(p, f).expect("feature stays in front");
        let fv = fd_pose(&pose, |p| proj(p, &feature));
        let ff = fd_point(&feature, |f| proj(&pose, f));
        let mut vis = SMatrix::<f64, 2, 6>::zeros();
        vis.fixed_view_mut::<2, 3>(0, 0).copy_from(&jv.theta);
        vis.fixed_view_mut::<2, 3>(0, 3).copy_from(&jv.pos);
        worst_visual = worst_visual.max(rel(&vis, &fv)).max(rel(&jv.feature, &ff));
    }
    let elapsed = start.elapsed();
    let pass = worst_range < 1e-5 && worst_echo < 1e-5 && worst_visual < 1e-5 && within(elapsed, 30.0);
    Outcome {
        pass,
        detail: format!(
            "{n} states; max rel err range {worst_range:.1e}, echo {worst_echo:.1e}, visual {worst_visual:.1e}; {:.2} s",
            elapsed.as_secs_f64()
        ),
    }
}

struct McData {
    per_trajectory: Vec<(String, Vec<SeedResult>)>,
    elapsed: Duration,
}

fn run_monte_carlo() -> McData {
    let start = Instant::now();
    let per_trajectory = trajectories()
        .into_iter()
        .map(|t| {
            let mut cfg = RunConfig::default();
            cfg.sim.trajectory = t.clone();
            (t.name().to_string(), monte_carlo(&cfg, &Mode::ALL, MC_SEEDS).expect("monte carlo"))
        })
        .collect();
    McData { per_trajectory, elapsed: start.elapsed() }
}

fn consistency(mc: &McData) -> Outcome {
    let (mut a, mut b, mut c) = (true, true, true);
    let mut detail = Vec::new();
    for (name, res) in &mc.per_trajectory {
        let fej = summarize(res, Mode::FejViro);
        let viro = summarize(res, Mode::Viro);
        let s = summarize(res, Mode::FejViroS);
        a &= fej.nees_ori < 6.0 && fej.nees_pos < 6.0;
        b &= viro.nees_ori >= 1.25 * fej.nees_ori;
        c &= s.nees_ori >= fej.nees_ori && s.nees_pos >= fej.nees_pos;
        detail.push(format!(
            "{name}: fej-viro {:.2}/{:.2}, viro {:.2}/{:.2} (x{:.2}), fej-viro-s {:.2}/{:.2}",
            fej.nees_ori,
            fej.nees_pos,
            viro.nees_ori,
            viro.nees_pos,
            viro.nees_ori / fej.nees_ori,
            s.nees_ori,
            s.nees_pos
        ));
    }
    let timely = within(mc.elapsed, 1800.0);
    Outcome {
        pass: a && b && c && timely,
        detail: format!(
            "(a) {} (b) {} (c) {}; ori/pos NEES {}; {} seeds x 3 trajectories x 4 modes in {:.0} s",
            pf(a),
            pf(b),
            pf(c),
            detail.join("; "),
            MC_SEEDS,
            mc.elapsed.as_secs_f64()
        ),
    }
}

fn mean_drop(res: &[SeedResult], mode: Mode) -> f64 {
    let v: Vec<f64> = res.iter().filter(|r| r.mode == mode).filter_map(|r| r.yaw_drop).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn yaw_overconfidence(mc: &McData) -> Outcome {
    let mut viro_hits = 0;
    let mut fej_ok = true;
    let mut detail = Vec::new();
    for (name, res) in &mc.per_trajectory {
        let v = mean_drop(res, Mode::Viro);
        let f = mean_drop(res, Mode::FejViro);
        viro_hits += usize::from(v > 0.5);
        fej_ok &= f < 0.1;
        detail.push(format!("{name}: viro {:.1}%, fej-viro {:.1}%", 100.0 * v, 100.0 * f));
    }
    Outcome { pass: viro_hits >= 2 && fej_ok, detail: format!("mean yaw 3-sigma drop within 5 s of init: {}", detail.join("; ")) }
}

fn drift(mc: &McData) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, res) in &mc.per_trajectory {
        let fej = summarize(res, Mode::FejViro).ate;
        let vio = summarize(res, Mode::Vio).ate;
        pass &= fej < vio;
        detail.push(format!("{name}: fej-viro {fej:.4} m vs vio {vio:.4} m"));
    }
    Outcome { pass, detail: format!("mean ATE {}", detail.join("; ")) }
}

/// Anchor errors and reported variances from `runs` initializations.
fn init_trials(runs: u64, noise: f64, perturb: bool, trajectory: TrajectorySpec) -> Vec<(Vec3, Vec3)> {
    let mut out = Vec::new();
    for s in 0..runs {
        let mut cfg = RunConfig::default();
        cfg.sim.trajectory = trajectory.clone();
        cfg.sim.seed = 500 + s;
        cfg.sim.duration = 20.0;
        cfg.sim.noise_scale = noise;
        cfg.filter.perturb_initial = perturb;
        let (truth, data) = simulate(&cfg.sim).expect("simulate");
        let run = run_pipeline(&cfg, &data).expect("pipeline");
        let Some(init) = run.init else { continue };
        for (k, (id, p)) in init.anchors.iter().enumerate() {
            let t = truth.anchors.iter().find(|a| a.0 == *id).expect("anchor id").1;
            let var = Vec3::new(init.paa_diagonal[3 * k], init.paa_diagonal[3 * k + 1], init.paa_diagonal[3 * k + 2]);
            out.push((p - t, var));
        }
    }
    out
}

fn init_accuracy() -> Outcome {
    let mut worst_noiseless = 0.0f64;
    let mut missing = 0;
    for t in trajectories() {
        let trials = init_trials(1, 0.0, false, t);
        missing += usize::from(trials.is_empty());
        for (e, _) in trials {
            worst_noiseless = worst_noiseless.max(e.norm());
        }
    }
    let noisy = init_trials(100, 1.0, false, TrajectorySpec::figure_eight());
    let mut errs: Vec<f64> = noisy.iter().map(|(e, _)| e.norm()).collect();
    errs.sort_by(f64::total_cmp);
    let p95 = errs.get(((errs.len() as f64 * 0.95).ceil() as usize).saturating_sub(1)).copied().unwrap_or(f64::INFINITY);
    let pass = missing == 0 && worst_noiseless < 1e-6 && errs.len() == 300 && p95 < 0.3;
    Outcome {
        pass,
        detail: format!(
            "noiseless max {worst_noiseless:.1e} m over 3 trajectories; noisy 95th percentile {p95:.3} m over {} anchors (100 runs, figure-eight)",
            errs.len()
        ),
    }
}

fn init_calibration() -> Outcome {
    let trials = init_trials(200, 1.0, true, TrajectorySpec::figure_eight());
    let n = trials.len() as f64;
    let anchors = 3;
    let mut ratios = Vec::new();
    for a in 0..anchors {
        let rows: Vec<&(Vec3, Vec3)> = trials.iter().skip(a).step_by(anchors).collect();
        let m = rows.len() as f64;
        let mean = rows.iter().map(|r| r.0).sum::<Vec3>() / m;
        let reported = rows.iter().map(|r| r.1).sum::<Vec3>() / m;
        for k in 0..3 {
            let empirical = rows.iter().map(|r| (r.0[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0);
            ratios.push(empirical / reported[k]);
        }
    }
    let pass = n as usize == 600 && ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let list: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    Outcome { pass, detail: format!("empirical/reported variance per anchor axis over {} inits: [{}]", n as usize / anchors, list.join(" ")) }
}

fn outputs(cfg: &RunConfig) -> Vec<String> {
    let (truth, data) = simulate(&cfg.sim).expect("simulate");
    let run = run_pipeline(cfg, &data).expect("pipeline");
    let series = evaluate(&run.epochs, &data.groundtruth).expect("evaluate");
    let dir = std::env::temp_dir().join(format!("viro-acceptance-{}-{}", std::process::id(), cfg.sim.seed));
    data.write(&dir, &cfg.sim.hash()).expect("write streams");
    let mut files: Vec<String> = ["imu.csv", "features.csv", "ranges.csv", "echoes.csv", "groundtruth.csv"]
        .iter()
        .map(|f| std::fs::read_to_string(dir.join(f)).expect("read back"))
        .collect();
    let _ = std::fs::remove_dir_all(&dir);
    files.push(trajectory_csv(&run));
    files.push(nees_csv(&series));
    files.push(sigma_bounds_csv(&series));
    files.push(init_report_csv(run.init.as_ref(), &truth.anchors));
    files
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.sim.seed = 77;
    cfg.sim.duration = 20.0;
    let a = outputs(&cfg);
    // Reordering work across threads must not change anything.
    let b = std::thread::spawn(move || outputs(&cfg)).join().expect("thread");
    let same = a == b;
    let bytes: usize = a.iter().map(String::len).sum();
    Outcome { pass: same, detail: format!("{} files, {bytes} bytes, identical: {same}", a.len()) }
}

fn pf(b: bool) -> &'static str {
    if b { "PASS" } else { "FAIL" }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored; a filter
    // argument that matches nothing here skips the suite.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f)) {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", pf(o.pass), o.detail);
        results.push((n, name, o));
    };
    record(1, "ideal observability null space", observability(Linearization::Ideal));
    record(2, "actual linearization loses yaw", observability(Linearization::Actual));
    record(3, "first-estimate linearization restores null space", observability(Linearization::Fej));
    record(4, "measurement Jacobians vs finite differences", jacobians());
    let mc = run_monte_carlo();
    record(5, "Monte-Carlo consistency", consistency(&mc));
    record(6, "yaw over-confidence without FEJ", yaw_overconfidence(&mc));
    record(7, "anchor initialization accuracy", init_accuracy());
    record(8, "anchor covariance calibration", init_calibration());
    record(9, "drift reduction vs VIO", drift(&mc));
    record(10, "deterministic outputs", determinism());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}


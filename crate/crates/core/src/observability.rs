//! Numerical observability analysis of the linearized estimator.
//!
//! The analysis state is `[θ | b_g | v | b_a | p | p_f | p_a1 | p_a2]` (24
//! dims): the IMU, one persistent feature and two anchors. The observability
//! matrix stacks `H_k Φ_{k,1}` over `n` camera-rate steps with two visual
//! rows, two robot-anchor rows and one echo row per step. Three
//! linearization schemes are compared:
//!
//! * ideal: everything evaluated at the true states;
//! * actual: fresh noisy estimates every step, with the propagation start
//!   (`x̂_{k|k}`) differing from the measurement point (`x̂_{k|k-1}`);
//! * first-estimate: every block frozen at its first noisy estimate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{skew, so3_exp, Quat, Vec3};
use crate::propagation::{compute_phi_qd, ImuNoise, ImuSample};
use crate::ranging::{echo_jacobians, squared_range_jacobians, UwbParams};
use crate::sim::{gravity, sample_imu, GroundTruth, SimConfig};
use crate::state::{ImuState, POS, THETA, VEL};
use crate::vision::Camera;

pub const DIM: usize = 24;
pub const FEATURE: usize = 15;
pub const ANCHOR1: usize = 18;
pub const ANCHOR2: usize = 21;
const ROWS_PER_STEP: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linearization {
    Ideal,
    Actual,
    Fej,
}

impl Linearization {
    pub fn name(&self) -> &'static str {
        match self {
            Linearization::Ideal => "ideal",
            Linearization::Actual => "actual",
            Linearization::Fej => "fej",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsConfig {
    pub steps: usize,
    pub dt: f64,
    pub start: f64,
    /// Estimation error injected on positions, velocities, feature and anchors.
    pub sigma_pos: f64,
    pub sigma_rot: f64,
    pub seed: u64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig { steps: 50, dt: 0.1, start: 2.0, sigma_pos: 0.05, sigma_rot: 0.01, seed: 1 }
    }
}

/// Ground truth and noiseless IMU readings for one analysis window.
#[derive(Clone, Debug)]
pub struct ObsScene {
    pub gt: GroundTruth,
    pub imu: Vec<ImuSample>,
    pub camera: Camera,
    pub uwb: UwbParams,
    pub feature: Vec3,
    pub anchors: [Vec3; 2],
}

impl ObsScene {
    pub fn new(sim: &SimConfig, cfg: &ObsConfig) -> Result<Self> {
        if sim.anchors.len() < 2 {
            return Err(Error::Config("observability analysis needs two anchors".into()));
        }
        let quiet = SimConfig { noise_scale: 0.0, duration: cfg.start + cfg.dt * (cfg.steps as f64 + 1.0), ..sim.clone() };
        let gt = quiet.ground_truth()?;
        let imu = sample_imu(&gt, &quiet);
        let times: Vec<f64> = (0..=cfg.steps).map(|k| cfg.start + cfg.dt * k as f64).collect();
        let feature = pick_feature(&gt, &sim.camera, &times)?;
        Ok(ObsScene { gt, imu, camera: sim.camera, uwb: sim.uwb, feature, anchors: [sim.anchors[0], sim.anchors[1]] })
    }
}

/// A point kept in front of the camera for the whole window: the candidate
/// on a sphere around the mean position with the largest minimum depth.
fn pick_feature(gt: &GroundTruth, cam: &Camera, times: &[f64]) -> Result<Vec3> {
    let poses: Vec<_> = times.iter().map(|t| gt.sample(*t).pose()).collect();
    let centre = poses.iter().map(|p| p.p).sum::<Vec3>() / poses.len() as f64;
    let mut best = (f64::MIN, Vec3::zeros());
    for i in 0..72 {
        for z in [-0.2, 0.0, 0.2, 0.4] {
            let a = i as f64 * std::f64::consts::TAU / 72.0;
            let cand = centre + Vec3::new(8.0 * a.cos(), 8.0 * a.sin(), 8.0 * z);
            let depth = poses.iter().map(|p| cam.to_camera(p, &cand).z).fold(f64::INFINITY, f64::min);
            if depth > best.0 {
                best = (depth, cand);
            }
        }
    }
    if best.0 < 0.5 {
        return Err(Error::Degenerate("no feature stays in front of the camera over the window".into()));
    }
    Ok(best.1)
}

/// Linearization point of the analysis state at one step.
#[derive(Clone, Debug)]
struct Point {
    imu: ImuState,
    feature: Vec3,
    anchors: [Vec3; 2],
}

/// Translation (3 columns) and yaw-about-gravity (1 column) directions at `x`.
pub fn nullspace_candidates(imu: &ImuState, feature: &Vec3, anchors: &[Vec3; 2], g: &Vec3) -> (DMatrix<f64>, DVector<f64>) {
    let mut n1 = DMatrix::zeros(DIM, 3);
    for off in [POS, FEATURE, ANCHOR1, ANCHOR2] {
        n1.view_mut((off, 0), (3, 3)).fill_with_identity();
    }
    let mut n2 = DVector::zeros(DIM);
    n2.rows_mut(THETA, 3).copy_from(&(imu.rot() * g));
    n2.rows_mut(VEL, 3).copy_from(&(-skew(&imu.v) * g));
    n2.rows_mut(POS, 3).copy_from(&(-skew(&imu.p) * g));
    n2.rows_mut(FEATURE, 3).copy_from(&(-skew(feature) * g));
    n2.rows_mut(ANCHOR1, 3).copy_from(&(-skew(&anchors[0]) * g));
    n2.rows_mut(ANCHOR2, 3).copy_from(&(-skew(&anchors[1]) * g));
    (n1, n2)
}

/// Measurement rows of one step at the given linearization point.
fn measurement_rows(scene: &ObsScene, x: &Point) -> Result<DMatrix<f64>> {
    let pose = x.imu.pose();
    let mut h = DMatrix::zeros(ROWS_PER_STEP, DIM);
    let vj = scene.camera.jacobians(&pose, &x.feature)?;
    h.view_mut((0, THETA), (2, 3)).copy_from(&vj.theta);
    h.view_mut((0, POS), (2, 3)).copy_from(&vj.pos);
    h.view_mut((0, FEATURE), (2, 3)).copy_from(&vj.feature);
    for (i, (a, off)) in x.anchors.iter().zip([ANCHOR1, ANCHOR2]).enumerate() {
        let rj = squared_range_jacobians(&pose, a, &scene.uwb).ok_or_else(|| Error::Degenerate("anchor on ranging node".into()))?;
        h.view_mut((2 + i, THETA), (1, 3)).copy_from(&rj.theta);
        h.view_mut((2 + i, POS), (1, 3)).copy_from(&rj.pos);
        h.view_mut((2 + i, off), (1, 3)).copy_from(&rj.anchor);
    }
    let (gi, gj) = echo_jacobians(&x.anchors[0], &x.anchors[1]).ok_or_else(|| Error::Degenerate("coincident anchors".into()))?;
    h.view_mut((4, ANCHOR1), (1, 3)).copy_from(&gi);
    h.view_mut((4, ANCHOR2), (1, 3)).copy_from(&gj);
    Ok(h)
}

struct Perturber {
    rng: ChaCha8Rng,
    sigma_pos: f64,
    sigma_rot: f64,
}

impl Perturber {
    fn n3(&mut self, s: f64) -> Vec3 {
        let mut v = Vec3::zeros();
        for i in 0..3 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            v[i] = z * s;
        }
        v
    }

    fn imu(&mut self, x: &ImuState) -> ImuState {
        let mut out = x.clone();
        let d = self.n3(self.sigma_rot);
        out.q = Quat::from_rot(&(so3_exp(&-d) * x.rot()));
        out.v += self.n3(self.sigma_pos);
        out.p += self.n3(self.sigma_pos);
        out
    }

    fn point(&mut self, p: &Vec3) -> Vec3 {
        p + self.n3(self.sigma_pos)
    }
}

#[derive(Clone, Debug)]
pub struct ObservabilityReport {
    pub mode: Linearization,
    pub o: DMatrix<f64>,
    pub n1: DMatrix<f64>,
    pub n2: DVector<f64>,
    /// `‖O n‖ / ‖O‖₂` for the three translation directions and yaw, with each `n` unit-normalized.
    pub residuals: [f64; 4],
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Set when the window barely moves or rotates.
    pub degenerate: bool,
}

impl ObservabilityReport {
    pub fn csv_header() -> &'static str {
        "mode,rows,rank,res_x,res_y,res_z,res_yaw,sigma_max,sigma_20,sigma_21,degenerate"
    }

    pub fn csv_row(&self) -> String {
        let sv = |i: usize| self.singular_values.get(i).copied().unwrap_or(0.0);
        format!(
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.mode.name(),
            self.o.nrows(),
            self.rank,
            self.residuals[0],
            self.residuals[1],
            self.residuals[2],
            self.residuals[3],
            sv(0),
            sv(19),
            sv(20),
            self.degenerate
        )
    }
}

fn embed(phi: &crate::propagation::Mat15) -> DMatrix<f64> {
    let mut m = DMatrix::identity(DIM, DIM);
    for i in 0..15 {
        for j in 0..15 {
            m[(i, j)] = phi[(i, j)];
        }
    }
    m
}

pub fn build_observability_matrix(scene: &ObsScene, mode: Linearization, cfg: &ObsConfig) -> Result<ObservabilityReport> {
    if cfg.steps < 10 {
        return Err(Error::Config("observability analysis needs at least 10 steps".into()));
    }
    let g = gravity();
    let noise = ImuNoise::default();
    let mut pert = Perturber { rng: ChaCha8Rng::seed_from_u64(cfg.seed), sigma_pos: cfg.sigma_pos, sigma_rot: cfg.sigma_rot };
    let time = |k: usize| cfg.start + cfg.dt * k as f64;
    let truth = |k: usize| scene.gt.sample(time(k)).imu_state();
    let true_point = |k: usize| Point { imu: truth(k), feature: scene.feature, anchors: scene.anchors };

    // Per step: the point used for H_k (x̂_{k|k-1}) and the start of the next propagation (x̂_{k|k}).
    let mut meas_points = Vec::with_capacity(cfg.steps);
    let mut prop_starts = Vec::with_capacity(cfg.steps);
    let fej_feature = pert.point(&scene.feature);
    let fej_anchors = [pert.point(&scene.anchors[0]), pert.point(&scene.anchors[1])];
    for k in 0..cfg.steps {
        match mode {
            Linearization::Ideal => {
                meas_points.push(true_point(k));
                prop_starts.push(truth(k));
            }
            Linearization::Actual => {
                let prior = pert.imu(&truth(k));
                let post = pert.imu(&truth(k));
                let feature = pert.point(&scene.feature);
                let anchors = [pert.point(&scene.anchors[0]), pert.point(&scene.anchors[1])];
                meas_points.push(Point { imu: prior, feature, anchors });
                prop_starts.push(post);
            }
            Linearization::Fej => {
                let prior = pert.imu(&truth(k));
                prop_starts.push(prior.clone());
                meas_points.push(Point { imu: prior, feature: fej_feature, anchors: fej_anchors });
            }
        }
    }

    let mut o = DMatrix::zeros(ROWS_PER_STEP * cfg.steps, DIM);
    let mut phi_k1 = DMatrix::identity(DIM, DIM);
    for k in 0..cfg.steps {
        if k > 0 {
            let tr = compute_phi_qd(&prop_starts[k - 1], Some(&meas_points[k].imu), &truth(k - 1), &scene.imu, time(k - 1), time(k), &noise, &g)?;
            phi_k1 = embed(&tr.phi) * phi_k1;
        }
        let h = measurement_rows(scene, &meas_points[k])?;
        o.view_mut((ROWS_PER_STEP * k, 0), (ROWS_PER_STEP, DIM)).copy_from(&(h * &phi_k1));
    }

    let first = &meas_points[0];
    let (n1, n2) = nullspace_candidates(&first.imu, &first.feature, &first.anchors, &g);
    let sv = o.clone().singular_values();
    let mut singular_values: Vec<f64> = sv.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let smax = singular_values[0];
    let rank = singular_values.iter().filter(|s| **s > 1e-8 * smax).count();
    let res = |n: DVector<f64>| (&o * &n).norm() / (smax * n.norm());
    let residuals = [res(n1.column(0).into_owned()), res(n1.column(1).into_owned()), res(n1.column(2).into_owned()), res(n2.clone())];

    let speeds: Vec<f64> = (0..cfg.steps).map(|k| truth(k).v.norm()).collect();
    let turn = crate::mathx::so3_log(&(truth(cfg.steps - 1).rot() * truth(0).rot().transpose())).norm();
    let degenerate = speeds.iter().cloned().fold(0.0, f64::max) < 1e-3 || turn < 1e-3;

    Ok(ObservabilityReport { mode, o, n1, n2, residuals, rank, singular_values, degenerate })
}

//! Deterministic ground truth and measurement streams.
//!
//! Every stream draws from its own ChaCha stream derived from the master
//! seed, so adding or changing one stream never perturbs another.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mathx::{Mat3, Quat, Rot3, Vec3};
use crate::propagation::{ImuNoise, ImuSample};
use crate::ranging::{ranging_node, EchoMeasurement, RangeMeasurement, UwbParams};
use crate::state::{ImuState, Pose};
use crate::vision::{Camera, Vec2};

pub const GRAVITY: f64 = 9.81;

pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, GRAVITY)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectorySpec {
    /// Lissajous figure-eight with an independent vertical sinusoid.
    FigureEight { half_length: f64, half_width: f64, period: f64, height: f64, z_amplitude: f64, z_period: f64 },
    Circle { radius: f64, period: f64, height: f64, z_amplitude: f64, z_period: f64 },
    /// Natural cubic spline through the points, one segment per `segment_time`.
    Waypoints { points: Vec<Vec3>, segment_time: f64 },
    /// Quintic B-spline over control points drawn uniformly in `±extent` around `(0, 0, height)`.
    RandomWaypoints { count: usize, seed: u64, extent: Vec3, height: f64, segment_time: f64 },
    Line { start: Vec3, velocity: Vec3 },
}

impl TrajectorySpec {
    pub fn figure_eight() -> Self {
        TrajectorySpec::FigureEight { half_length: 4.0, half_width: 2.5, period: 20.0, height: 1.5, z_amplitude: 1.0, z_period: 7.0 }
    }

    pub fn circle() -> Self {
        TrajectorySpec::Circle { radius: 3.5, period: 16.0, height: 1.5, z_amplitude: 1.0, z_period: 6.0 }
    }

    pub fn random_waypoints() -> Self {
        TrajectorySpec::RandomWaypoints { count: 36, seed: 7, extent: Vec3::new(6.0, 6.0, 2.0), height: 1.5, segment_time: 2.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrajectorySpec::FigureEight { .. } => "figure-eight",
            TrajectorySpec::Circle { .. } => "circle",
            TrajectorySpec::Waypoints { .. } => "waypoints",
            TrajectorySpec::RandomWaypoints { .. } => "random-waypoints",
            TrajectorySpec::Line { .. } => "line",
        }
    }
}

/// ZYX Euler attitude: yaw `ψ0 + rate t + A sin(2π f t)`, roll and pitch sinusoids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttitudeSpec {
    pub yaw0: f64,
    pub yaw_rate: f64,
    pub yaw_amplitude: f64,
    pub yaw_frequency: f64,
    pub roll_amplitude: f64,
    pub roll_frequency: f64,
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
}

impl Default for AttitudeSpec {
    fn default() -> Self {
        AttitudeSpec {
            yaw0: 0.0,
            yaw_rate: 0.3,
            yaw_amplitude: 0.4,
            yaw_frequency: 0.08,
            roll_amplitude: 0.12,
            roll_frequency: 0.11,
            pitch_amplitude: 0.1,
            pitch_frequency: 0.14,
        }
    }
}

impl AttitudeSpec {
    pub fn fixed() -> Self {
        AttitudeSpec {
            yaw0: 0.0,
            yaw_rate: 0.0,
            yaw_amplitude: 0.0,
            yaw_frequency: 0.0,
            roll_amplitude: 0.0,
            roll_frequency: 0.0,
            pitch_amplitude: 0.0,
            pitch_frequency: 0.0,
        }
    }

    /// `(value, derivative)` for yaw, pitch, roll.
    fn angles(&self, t: f64) -> [(f64, f64); 3] {
        let tau = std::f64::consts::TAU;
        let s = |a: f64, f: f64| ((a * (tau * f * t).sin()), (a * tau * f * (tau * f * t).cos()));
        let (y, yd) = s(self.yaw_amplitude, self.yaw_frequency);
        let (p, pd) = s(self.pitch_amplitude, self.pitch_frequency);
        let (r, rd) = s(self.roll_amplitude, self.roll_frequency);
        [(self.yaw0 + self.yaw_rate * t + y, self.yaw_rate + yd), (p, pd), (r, rd)]
    }

    /// Global-to-IMU rotation and body angular rate.
    pub fn eval(&self, t: f64) -> (Rot3, Vec3) {
        let [(psi, dpsi), (th, dth), (phi, dphi)] = self.angles(t);
        let rz = Mat3::new(psi.cos(), -psi.sin(), 0.0, psi.sin(), psi.cos(), 0.0, 0.0, 0.0, 1.0);
        let ry = Mat3::new(th.cos(), 0.0, th.sin(), 0.0, 1.0, 0.0, -th.sin(), 0.0, th.cos());
        let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, phi.cos(), -phi.sin(), 0.0, phi.sin(), phi.cos());
        let body_to_global = rz * ry * rx;
        let w = Vec3::new(
            dphi - dpsi * th.sin(),
            dth * phi.cos() + dpsi * th.cos() * phi.sin(),
            -dth * phi.sin() + dpsi * th.cos() * phi.cos(),
        );
        (body_to_global.transpose(), w)
    }
}

/// Natural cubic spline in 3D with uniform knots.
#[derive(Clone, Debug, PartialEq)]
pub struct Spline {
    points: Vec<Vec3>,
    second: Vec<Vec3>,
    h: f64,
}

impl Spline {
    pub fn new(points: Vec<Vec3>, h: f64) -> Result<Self> {
        let n = points.len();
        if n < 4 {
            return Err(Error::Config(format!("spline needs at least 4 waypoints, got {n}")));
        }
        if !(h > 0.0) {
            return Err(Error::Config("segment time must be positive".into()));
        }
        // Interior second derivatives solve M_{i-1} + 4 M_i + M_{i+1} = 6 (P_{i-1} - 2 P_i + P_{i+1}) / h².
        let m = n - 2;
        let a = DMatrix::from_fn(m, m, |i, j| match i.abs_diff(j) {
            0 => 4.0,
            1 => 1.0,
            _ => 0.0,
        });
        let lu = a.lu();
        let mut second = vec![Vec3::zeros(); n];
        for axis in 0..3 {
            let b = DVector::from_fn(m, |i, _| 6.0 * (points[i][axis] - 2.0 * points[i + 1][axis] + points[i + 2][axis]) / (h * h));
            let x = lu.solve(&b).ok_or_else(|| Error::Degenerate("spline system".into()))?;
            for i in 0..m {
                second[i + 1][axis] = x[i];
            }
        }
        Ok(Spline { points, second, h })
    }

    pub fn duration(&self) -> f64 {
        self.h * (self.points.len() - 1) as f64
    }

    /// Position, velocity, acceleration; clamped to the last segment.
    pub fn eval(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let h = self.h;
        let k = ((t / h).floor().max(0.0) as usize).min(self.points.len() - 2);
        let (p0, p1) = (self.points[k], self.points[k + 1]);
        let (m0, m1) = (self.second[k], self.second[k + 1]);
        let a = (k + 1) as f64 * h - t;
        let b = t - k as f64 * h;
        let p = m0 * (a * a * a / (6.0 * h)) + m1 * (b * b * b / (6.0 * h)) + (p0 / h - m0 * (h / 6.0)) * a + (p1 / h - m1 * (h / 6.0)) * b;
        let v = -m0 * (a * a / (2.0 * h)) + m1 * (b * b / (2.0 * h)) - (p0 / h - m0 * (h / 6.0)) + (p1 / h - m1 * (h / 6.0));
        let acc = m0 * (a / h) + m1 * (b / h);
        (p, v, acc)
    }
}

/// Uniform quintic B-spline: C⁴, so sampled IMU signals stay smooth.
/// Control points are approached, not interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct QuinticBSpline {
    points: Vec<Vec3>,
    h: f64,
}

/// Rows: coefficients of u⁰..u⁵; columns: the six control points of a segment.
const QUINTIC_BASIS: [[f64; 6]; 6] = [
    [1.0, 26.0, 66.0, 26.0, 1.0, 0.0],
    [-5.0, -50.0, 0.0, 50.0, 5.0, 0.0],
    [10.0, 20.0, -60.0, 20.0, 10.0, 0.0],
    [-10.0, 20.0, 0.0, -20.0, 10.0, 0.0],
    [5.0, -20.0, 30.0, -20.0, 5.0, 0.0],
    [-1.0, 5.0, -10.0, 10.0, -5.0, 1.0],
];

impl QuinticBSpline {
    pub fn new(points: Vec<Vec3>, h: f64) -> Result<Self> {
        if points.len() < 6 {
            return Err(Error::Config(format!("quintic B-spline needs at least 6 control points, got {}", points.len())));
        }
        if !(h > 0.0) {
            return Err(Error::Config("segment time must be positive".into()));
        }
        Ok(QuinticBSpline { points, h })
    }

    pub fn duration(&self) -> f64 {
        self.h * (self.points.len() - 5) as f64
    }

    pub fn eval(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let segs = self.points.len() - 5;
        let k = ((t / self.h).floor().max(0.0) as usize).min(segs - 1);
        let u = t / self.h - k as f64;
        // Power-basis coefficients c_j, then p = Σ c_j u^j.
        let mut c = [Vec3::zeros(); 6];
        for (j, row) in QUINTIC_BASIS.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                c[j] += self.points[k + i] * (*w / 120.0);
            }
        }
        let mut p = Vec3::zeros();
        let mut v = Vec3::zeros();
        let mut a = Vec3::zeros();
        for j in 0..6 {
            let jf = j as f64;
            p += c[j] * u.powi(j as i32);
            if j >= 1 {
                v += c[j] * (jf * u.powi(j as i32 - 1));
            }
            if j >= 2 {
                a += c[j] * (jf * (jf - 1.0) * u.powi(j as i32 - 2));
            }
        }
        (p, v / self.h, a / (self.h * self.h))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Curve {
    FigureEight { lx: f64, ly: f64, w: f64, h: f64, az: f64, wz: f64 },
    Circle { r: f64, w: f64, h: f64, az: f64, wz: f64 },
    Spline(Spline),
    BSpline(QuinticBSpline),
    Line { start: Vec3, velocity: Vec3 },
}

/// Kinematic state at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub stamp: f64,
    /// Global-to-IMU rotation.
    pub rot: Rot3,
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    /// Angular rate in the IMU frame.
    pub w: Vec3,
}

impl TruthSample {
    pub fn pose(&self) -> Pose {
        Pose::new(&self.rot, self.p)
    }

    pub fn imu_state(&self) -> ImuState {
        ImuState { q: Quat::from_rot(&self.rot), bg: Vec3::zeros(), v: self.v, ba: Vec3::zeros(), p: self.p }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    path: Curve,
    attitude: AttitudeSpec,
    pub anchors: Vec<(u32, Vec3)>,
    pub features: Vec<(u64, Vec3)>,
}

impl GroundTruth {
    pub fn sample(&self, t: f64) -> TruthSample {
        let (p, v, a) = match &self.path {
            Curve::FigureEight { lx, ly, w, h, az, wz } => (
                Vec3::new(lx * (w * t).sin(), ly * (2.0 * w * t).sin(), h + az * (wz * t).sin()),
                Vec3::new(lx * w * (w * t).cos(), 2.0 * ly * w * (2.0 * w * t).cos(), az * wz * (wz * t).cos()),
                Vec3::new(-lx * w * w * (w * t).sin(), -4.0 * ly * w * w * (2.0 * w * t).sin(), -az * wz * wz * (wz * t).sin()),
            ),
            Curve::Circle { r, w, h, az, wz } => (
                Vec3::new(r * (w * t).cos(), r * (w * t).sin(), h + az * (wz * t).sin()),
                Vec3::new(-r * w * (w * t).sin(), r * w * (w * t).cos(), az * wz * (wz * t).cos()),
                Vec3::new(-r * w * w * (w * t).cos(), -r * w * w * (w * t).sin(), -az * wz * wz * (wz * t).sin()),
            ),
            Curve::Spline(s) => s.eval(t),
            Curve::BSpline(s) => s.eval(t),
            Curve::Line { start, velocity } => (start + velocity * t, *velocity, Vec3::zeros()),
        };
        let (rot, w) = self.attitude.eval(t);
        TruthSample { stamp: t, rot, p, v, a, w }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    pub trajectory: TrajectorySpec,
    pub attitude: AttitudeSpec,
    pub imu_rate: f64,
    pub camera_rate: f64,
    pub uwb_rate: f64,
    pub anchors: Vec<Vec3>,
    /// Landmarks in the map; at most `max_features` are tracked per frame.
    pub map_size: usize,
    pub max_features: usize,
    /// Landmarks lie in a ring of these horizontal radii around the origin.
    pub map_radius: (f64, f64),
    pub map_height: (f64, f64),
    pub max_depth: f64,
    /// Half field of view in normalized coordinates.
    pub fov: (f64, f64),
    pub imu_noise: ImuNoise,
    pub uwb: UwbParams,
    pub camera: Camera,
    /// Multiplies every sampled noise term; zero gives noiseless streams.
    pub noise_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            duration: 60.0,
            trajectory: TrajectorySpec::figure_eight(),
            attitude: AttitudeSpec::default(),
            imu_rate: 200.0,
            camera_rate: 10.0,
            uwb_rate: 60.0,
            anchors: vec![Vec3::new(4.5, 3.5, 3.2), Vec3::new(-5.0, 2.5, 0.0), Vec3::new(0.5, -4.5, 2.8)],
            map_size: 2500,
            max_features: 180,
            map_radius: (7.0, 12.0),
            map_height: (-1.0, 4.0),
            max_depth: 25.0,
            fov: (320.0 / 460.0, 240.0 / 460.0),
            imu_noise: ImuNoise::default(),
            uwb: UwbParams::default(),
            camera: Camera::default(),
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Map = 1,
    Imu = 2,
    Camera = 3,
    Range = 4,
    Echo = 5,
    Waypoints = 6,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("imu_rate", self.imu_rate), ("camera_rate", self.camera_rate), ("uwb_rate", self.uwb_rate)] {
            if !(r > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Short hex digest of the configuration, written into stream headers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        self.validate()?;
        let tau = std::f64::consts::TAU;
        let path = match &self.trajectory {
            TrajectorySpec::FigureEight { half_length, half_width, period, height, z_amplitude, z_period } => Curve::FigureEight {
                lx: *half_length,
                ly: *half_width,
                w: tau / period,
                h: *height,
                az: *z_amplitude,
                wz: tau / z_period,
            },
            TrajectorySpec::Circle { radius, period, height, z_amplitude, z_period } => {
                Curve::Circle { r: *radius, w: tau / period, h: *height, az: *z_amplitude, wz: tau / z_period }
            }
            TrajectorySpec::Waypoints { points, segment_time } => Curve::Spline(Spline::new(points.clone(), *segment_time)?),
            TrajectorySpec::RandomWaypoints { count, seed, extent, height, segment_time } => {
                let mut rng = stream_rng(*seed, Stream::Waypoints);
                let points = (0..*count)
                    .map(|_| {
                        Vec3::new(
                            rng.random_range(-extent.x..=extent.x),
                            rng.random_range(-extent.y..=extent.y),
                            height + rng.random_range(-extent.z..=extent.z),
                        )
                    })
                    .collect();
                Curve::BSpline(QuinticBSpline::new(points, *segment_time)?)
            }
            TrajectorySpec::Line { start, velocity } => Curve::Line { start: *start, velocity: *velocity },
        };
        let span = match &path {
            Curve::Spline(s) => Some(s.duration()),
            Curve::BSpline(s) => Some(s.duration()),
            _ => None,
        };
        if let Some(span) = span.filter(|&d| d < self.duration) {
            return Err(Error::Config(format!("trajectory lasts {span} s, shorter than duration {}", self.duration)));
        }
        let mut rng = stream_rng(self.seed, Stream::Map);
        let features = (0..self.map_size as u64)
            .map(|id| {
                let r = rng.random_range(self.map_radius.0..=self.map_radius.1);
                let phi = rng.random_range(0.0..tau);
                let z = rng.random_range(self.map_height.0..=self.map_height.1);
                (id, Vec3::new(r * phi.cos(), r * phi.sin(), z))
            })
            .collect();
        let anchors = self.anchors.iter().enumerate().map(|(i, a)| (i as u32, *a)).collect();
        Ok(GroundTruth { path, attitude: self.attitude, anchors, features })
    }

    fn stamps(&self, rate: f64) -> impl Iterator<Item = f64> {
        let n = (self.duration * rate).floor() as u64;
        (0..=n).map(move |i| i as f64 / rate)
    }
}

/// Observations of one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub stamp: f64,
    pub observations: Vec<(u64, Vec2)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub stamp: f64,
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<Frame>,
    pub ranges: Vec<RangeMeasurement>,
    pub echoes: Vec<EchoMeasurement>,
    pub groundtruth: Vec<GroundTruthRecord>,
}

/// IMU readings with random-walk biases starting at zero.
pub fn sample_imu(gt: &GroundTruth, cfg: &SimConfig) -> Vec<ImuSample> {
    let mut rng = stream_rng(cfg.seed, Stream::Imu);
    let dt = 1.0 / cfg.imu_rate;
    let k = cfg.noise_scale;
    let n = &cfg.imu_noise;
    let mut bg = Vec3::zeros();
    let mut ba = Vec3::zeros();
    let g = gravity();
    cfg.stamps(cfg.imu_rate)
        .map(|t| {
            let s = gt.sample(t);
            let ng = normal3(&mut rng) * (k * n.sigma_g / dt.sqrt());
            let na = normal3(&mut rng) * (k * n.sigma_a / dt.sqrt());
            let out = ImuSample { stamp: t, gyro: s.w + bg + ng, accel: s.rot * (s.a + g) + ba + na };
            bg += normal3(&mut rng) * (k * n.sigma_wg * dt.sqrt());
            ba += normal3(&mut rng) * (k * n.sigma_wa * dt.sqrt());
            out
        })
        .collect()
}

fn visible(cfg: &SimConfig, pose: &Pose, p_f: &Vec3) -> Option<Vec2> {
    let pc = cfg.camera.to_camera(pose, p_f);
    if pc.z < 0.5 || pc.z > cfg.max_depth {
        return None;
    }
    let z = Vec2::new(pc.x / pc.z, pc.y / pc.z);
    (z.x.abs() <= cfg.fov.0 && z.y.abs() <= cfg.fov.1).then_some(z)
}

/// Per-frame observations, capped at `max_features` and preferring features
/// tracked in the previous frame.
pub fn sample_features(gt: &GroundTruth, cfg: &SimConfig) -> Vec<Frame> {
    let mut rng = stream_rng(cfg.seed, Stream::Camera);
    let sigma = cfg.noise_scale * cfg.camera.sigma;
    let mut tracked: Vec<u64> = Vec::new();
    cfg.stamps(cfg.camera_rate)
        .map(|t| {
            let pose = gt.sample(t).pose();
            let vis: Vec<(u64, Vec2)> =
                gt.features.iter().filter_map(|(id, p)| visible(cfg, &pose, p).map(|z| (*id, z))).collect();
            let (mut keep, fresh): (Vec<_>, Vec<_>) = vis.into_iter().partition(|(id, _)| tracked.binary_search(id).is_ok());
            keep.truncate(cfg.max_features);
            let room = cfg.max_features - keep.len();
            keep.extend(fresh.into_iter().take(room));
            keep.sort_by_key(|o| o.0);
            tracked = keep.iter().map(|o| o.0).collect();
            let observations = keep
                .into_iter()
                .map(|(id, z)| (id, z + Vec2::new(normal(&mut rng), normal(&mut rng)) * sigma))
                .collect();
            Frame { stamp: t, observations }
        })
        .collect()
}

pub fn sample_uwb(gt: &GroundTruth, cfg: &SimConfig) -> (Vec<RangeMeasurement>, Vec<EchoMeasurement>) {
    let mut rr = stream_rng(cfg.seed, Stream::Range);
    let mut re = stream_rng(cfg.seed, Stream::Echo);
    let u = &cfg.uwb;
    let mut ranges = Vec::new();
    let mut echoes = Vec::new();
    for t in cfg.stamps(cfg.uwb_rate) {
        let node = ranging_node(&gt.sample(t).pose(), u);
        for (id, a) in &gt.anchors {
            let d = (node - a).norm() + u.bias + cfg.noise_scale * u.sigma_r * normal(&mut rr);
            ranges.push(RangeMeasurement { stamp: t, anchor: *id, d });
        }
        for (i, (id_i, a_i)) in gt.anchors.iter().enumerate() {
            for (id_j, a_j) in &gt.anchors[i + 1..] {
                let d = (a_i - a_j).norm() + u.bias + cfg.noise_scale * u.sigma_e * normal(&mut re);
                echoes.push(EchoMeasurement { stamp: t, anchor_i: *id_i, anchor_j: *id_j, d });
            }
        }
    }
    (ranges, echoes)
}

pub fn simulate(cfg: &SimConfig) -> Result<(GroundTruth, SimData)> {
    let gt = cfg.ground_truth()?;
    let imu = sample_imu(&gt, cfg);
    let frames = sample_features(&gt, cfg);
    let (ranges, echoes) = sample_uwb(&gt, cfg);
    let groundtruth = cfg
        .stamps(cfg.camera_rate)
        .map(|t| {
            let s = gt.sample(t);
            GroundTruthRecord { stamp: t, q: Quat::from_rot(&s.rot), p: s.p, v: s.v }
        })
        .collect();
    Ok((gt, SimData { imu, frames, ranges, echoes, groundtruth }))
}

const FILES: [(&str, &str, &str); 5] = [
    ("imu", "imu.csv", "stamp,wx,wy,wz,ax,ay,az"),
    ("feature", "features.csv", "stamp,feat_id,u,v"),
    ("range", "ranges.csv", "stamp,anchor_id,d"),
    ("echo", "echoes.csv", "stamp,anchor_i,anchor_j,d"),
    ("groundtruth", "groundtruth.csv", "stamp,qx,qy,qz,qw,px,py,pz,vx,vy,vz"),
];

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

impl SimData {
    /// One file per stream, each starting with a `# stream=<kind> config=<hash>` line.
    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bodies = vec![String::new(); 5];
        for s in &self.imu {
            writeln!(bodies[0], "{}", join(&[s.stamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z])).unwrap();
        }
        for f in &self.frames {
            for (id, z) in &f.observations {
                writeln!(bodies[1], "{},{id},{},{}", f.stamp, z.x, z.y).unwrap();
            }
        }
        for r in &self.ranges {
            writeln!(bodies[2], "{},{},{}", r.stamp, r.anchor, r.d).unwrap();
        }
        for e in &self.echoes {
            writeln!(bodies[3], "{},{},{},{}", e.stamp, e.anchor_i, e.anchor_j, e.d).unwrap();
        }
        for g in &self.groundtruth {
            writeln!(bodies[4], "{}", join(&[g.stamp, g.q.x, g.q.y, g.q.z, g.q.w, g.p.x, g.p.y, g.p.z, g.v.x, g.v.y, g.v.z])).unwrap();
        }
        for ((kind, file, header), body) in FILES.iter().zip(bodies) {
            fs::write(dir.join(file), format!("# stream={kind} config={config_hash}\n{header}\n{body}"))?;
        }
        Ok(())
    }

    /// Read streams written by [`SimData::write`]. Frames are rebuilt from the
    /// feature rows; camera frames without any observation are lost.
    pub fn read(dir: &Path) -> Result<SimData> {
        let rows = |idx: usize| -> Result<Vec<Vec<f64>>> {
            let (kind, file, header) = FILES[idx];
            let text = fs::read_to_string(dir.join(file))?;
            let mut lines = text.lines();
            let first = lines.next().unwrap_or_default();
            if !first.starts_with(&format!("# stream={kind}")) {
                return Err(Error::Parse(format!("{file}: missing stream header")));
            }
            let ncols = header.split(',').count();
            lines
                .filter(|l| !l.trim().is_empty() && !l.starts_with("stamp"))
                .enumerate()
                .map(|(i, l)| {
                    let v: Vec<f64> = l
                        .split(',')
                        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{file}:{}: {e}", i + 3))))
                        .collect::<Result<_>>()?;
                    if v.len() != ncols {
                        return Err(Error::Parse(format!("{file}:{}: expected {ncols} fields", i + 3)));
                    }
                    Ok(v)
                })
                .collect()
        };
        let imu = rows(0)?
            .into_iter()
            .map(|v| ImuSample { stamp: v[0], gyro: Vec3::new(v[1], v[2], v[3]), accel: Vec3::new(v[4], v[5], v[6]) })
            .collect();
        let mut frames: Vec<Frame> = Vec::new();
        for v in rows(1)? {
            let obs = (v[1] as u64, Vec2::new(v[2], v[3]));
            match frames.last_mut() {
                Some(f) if f.stamp == v[0] => f.observations.push(obs),
                _ => frames.push(Frame { stamp: v[0], observations: vec![obs] }),
            }
        }
        let ranges = rows(2)?.into_iter().map(|v| RangeMeasurement { stamp: v[0], anchor: v[1] as u32, d: v[2] }).collect();
        let echoes = rows(3)?
            .into_iter()
            .map(|v| EchoMeasurement { stamp: v[0], anchor_i: v[1] as u32, anchor_j: v[2] as u32, d: v[3] })
            .collect();
        let groundtruth = rows(4)?
            .into_iter()
            .map(|v| GroundTruthRecord {
                stamp: v[0],
                q: Quat::new(v[1], v[2], v[3], v[4]),
                p: Vec3::new(v[5], v[6], v[7]),
                v: Vec3::new(v[8], v[9], v[10]),
            })
            .collect();
        Ok(SimData { imu, frames, ranges, echoes, groundtruth })
    }
}

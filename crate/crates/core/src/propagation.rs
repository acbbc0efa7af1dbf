//! IMU strapdown integration, state transition and discrete process noise.
//!
//! Measurements are interpolated between samples (cubic where neighbours
//! exist) and each sub-interval is integrated with classical RK4. The transition matrix uses
//! the closed-form block structure so that, under first-estimate
//! linearization, the orientation/velocity/position blocks depend only on the
//! linearization points at the two ends of the interval.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{orthonormalize, skew, Mat3, Vec3};
use crate::state::{FejKey, FejValue, FilterState, ImuState, BA, BG, IMU_DIM, POS, THETA, VEL};

pub type Mat15 = SMatrix<f64, 15, 15>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// Gyroscope white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub sigma_wg: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_wa: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise { sigma_g: 1.6968e-4, sigma_wg: 1.9393e-5, sigma_a: 2.0e-3, sigma_wa: 3.0e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub phi: Mat15,
    pub qd: Mat15,
    pub end: ImuState,
}

fn check_samples(samples: &[ImuSample], t0: f64, t1: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidInterval(t0, t1));
    }
    for w in samples.windows(2) {
        if !(w[1].stamp > w[0].stamp) {
            return Err(Error::NonMonotoneStamp { prev: w[0].stamp, next: w[1].stamp });
        }
    }
    Ok(())
}

/// Measurement at `t`: Catmull-Rom cubic through the four surrounding samples,
/// linear where a neighbour is missing, held constant outside the samples.
pub fn imu_at(samples: &[ImuSample], t: f64) -> (Vec3, Vec3) {
    let k = samples.partition_point(|s| s.stamp <= t);
    if k == 0 {
        return (samples[0].gyro, samples[0].accel);
    }
    if k == samples.len() {
        let s = &samples[k - 1];
        return (s.gyro, s.accel);
    }
    let (a, b) = (&samples[k - 1], &samples[k]);
    let h = b.stamp - a.stamp;
    let u = (t - a.stamp) / h;
    if k >= 2 && k + 1 < samples.len() {
        let (z, c) = (&samples[k - 2], &samples[k + 1]);
        // Uniform-rate streams only; fall through to linear otherwise.
        if ((a.stamp - z.stamp) - h).abs() < 1e-9 * h.max(1.0) && ((c.stamp - b.stamp) - h).abs() < 1e-9 * h.max(1.0) {
            let w = [
                u * ((2.0 - u) * u - 1.0) * 0.5,
                (u * u * (3.0 * u - 5.0) + 2.0) * 0.5,
                u * ((4.0 - 3.0 * u) * u + 1.0) * 0.5,
                u * u * (u - 1.0) * 0.5,
            ];
            let mix = |f: fn(&ImuSample) -> Vec3| f(z) * w[0] + f(a) * w[1] + f(b) * w[2] + f(c) * w[3];
            return (mix(|s| s.gyro), mix(|s| s.accel));
        }
    }
    (a.gyro + (b.gyro - a.gyro) * u, a.accel + (b.accel - a.accel) * u)
}

/// Knot times: `t0`, every sample strictly inside, `t1`.
fn knots(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<f64> {
    let mut k = vec![t0];
    k.extend(samples.iter().map(|s| s.stamp).filter(|&t| t > t0 && t < t1));
    if t1 > t0 {
        k.push(t1);
    }
    k
}

#[derive(Clone, Copy)]
struct Nominal {
    r: Mat3,
    v: Vec3,
    p: Vec3,
}

/// Nominal state plus the integrals needed for the closed-form transition.
#[derive(Clone, Copy)]
struct Aug {
    n: Nominal,
    j: Mat3,
    k32: Mat3,
    k52: Mat3,
    k54: Mat3,
}

impl Aug {
    fn start(n: Nominal) -> Self {
        Aug { n, j: Mat3::zeros(), k32: Mat3::zeros(), k52: Mat3::zeros(), k54: Mat3::zeros() }
    }

    fn deriv(&self, w: &Vec3, a: &Vec3, g: &Vec3) -> Aug {
        let rt = self.n.r.transpose();
        let fa = rt * a;
        Aug {
            n: Nominal { r: -skew(w) * self.n.r, v: fa - g, p: self.n.v },
            j: -rt,
            k32: -skew(&fa) * self.j,
            k52: self.k32,
            k54: self.j,
        }
    }

    fn axpy(&self, h: f64, d: &Aug) -> Aug {
        Aug {
            n: Nominal { r: self.n.r + d.n.r * h, v: self.n.v + d.n.v * h, p: self.n.p + d.n.p * h },
            j: self.j + d.j * h,
            k32: self.k32 + d.k32 * h,
            k52: self.k52 + d.k52 * h,
            k54: self.k54 + d.k54 * h,
        }
    }
}

fn rk4(y: &Aug, h: f64, w: [Vec3; 3], a: [Vec3; 3], g: &Vec3) -> Aug {
    let k1 = y.deriv(&w[0], &a[0], g);
    let k2 = y.axpy(h / 2.0, &k1).deriv(&w[1], &a[1], g);
    let k3 = y.axpy(h / 2.0, &k2).deriv(&w[1], &a[1], g);
    let k4 = y.axpy(h, &k3).deriv(&w[2], &a[2], g);
    let mut out = y.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
    out.n.r = orthonormalize(&out.n.r);
    out
}

fn set3(m: &mut Mat15, r: usize, c: usize, b: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Overwrite the orientation/velocity/position blocks that only depend on
/// the endpoint linearization points.
fn endpoint_blocks(phi: &mut Mat15, s: &ImuState, e: &ImuState, dt: f64, g: &Vec3) {
    let rs = s.rot();
    let re = e.rot();
    let rst = rs.transpose();
    set3(phi, THETA, THETA, &(re * rst));
    set3(phi, VEL, THETA, &(-skew(&(e.v - s.v + g * dt)) * rst));
    set3(phi, POS, THETA, &(-skew(&(e.p - s.p - s.v * dt + g * (0.5 * dt * dt))) * rst));
    set3(phi, POS, VEL, &(Mat3::identity() * dt));
}

/// `G Qc Gᵀ`. The velocity block is `Rᵀ (σ_a² I) R`, which is rotation-free.
fn noise_input(noise: &ImuNoise) -> Mat15 {
    let mut q = Mat15::zeros();
    let sg = noise.sigma_g * noise.sigma_g;
    let sa = noise.sigma_a * noise.sigma_a;
    set3(&mut q, THETA, THETA, &(Mat3::identity() * sg));
    set3(&mut q, BG, BG, &(Mat3::identity() * (noise.sigma_wg * noise.sigma_wg)));
    set3(&mut q, VEL, VEL, &(Mat3::identity() * sa));
    set3(&mut q, BA, BA, &(Mat3::identity() * (noise.sigma_wa * noise.sigma_wa)));
    q
}

fn to_nominal(s: &ImuState) -> Nominal {
    Nominal { r: s.rot(), v: s.v, p: s.p }
}

fn from_nominal(template: &ImuState, n: &Nominal) -> ImuState {
    let mut out = template.clone();
    out.set_rot(&n.r);
    out.v = n.v;
    out.p = n.p;
    out
}

/// Integrate the nominal IMU state from `t0` to `t1`. Biases are held.
pub fn integrate(start: &ImuState, samples: &[ImuSample], t0: f64, t1: f64, g: &Vec3) -> Result<ImuState> {
    Ok(transition_inner(start, samples, t0, t1, g, None)?.end)
}

fn transition_inner(
    start: &ImuState,
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    g: &Vec3,
    noise: Option<&ImuNoise>,
) -> Result<Transition> {
    check_samples(samples, t0, t1)?;
    let ks = knots(samples, t0, t1);
    let mut n = to_nominal(start);
    let mut phi = Mat15::identity();
    let mut qd = Mat15::zeros();
    let meas = |t: f64| {
        let (w, a) = imu_at(samples, t);
        (w - start.bg, a - start.ba)
    };
    for win in ks.windows(2) {
        let (ta, tb) = (win[0], win[1]);
        let h = tb - ta;
        let (w0, a0) = meas(ta);
        let (w1, a1) = meas(0.5 * (ta + tb));
        let (w2, a2) = meas(tb);
        let y = rk4(&Aug::start(n), h, [w0, w1, w2], [a0, a1, a2], g);
        if noise.is_some() {
            let mut step = Mat15::identity();
            let rs = n.r;
            let re = y.n.r;
            let rst = rs.transpose();
            set3(&mut step, THETA, THETA, &(re * rst));
            set3(&mut step, THETA, BG, &(re * y.j));
            set3(&mut step, VEL, THETA, &(-skew(&(y.n.v - n.v + g * h)) * rst));
            set3(&mut step, VEL, BG, &y.k32);
            set3(&mut step, VEL, BA, &y.j);
            set3(&mut step, POS, THETA, &(-skew(&(y.n.p - n.p - n.v * h + g * (0.5 * h * h))) * rst));
            set3(&mut step, POS, BG, &y.k52);
            set3(&mut step, POS, VEL, &(Mat3::identity() * h));
            set3(&mut step, POS, BA, &y.k54);
            phi = step * phi;
            if let Some(nz) = noise {
                // Trapezoid on Φ(e,τ) G Qc Gᵀ Φ(e,τ)ᵀ over the sub-interval.
                let qc = noise_input(nz);
                qd = step * qd * step.transpose() + (step * qc * step.transpose() + qc) * (0.5 * h);
            }
        }
        n = y.n;
    }
    let end = from_nominal(start, &n);
    let qd = (qd + qd.transpose()) * 0.5;
    Ok(Transition { phi, qd, end })
}

/// Transition and discrete noise over `[t0, t1]`.
///
/// The nominal path is integrated from `path_start`; the orientation,
/// velocity and position blocks of `Φ` are then evaluated at `lin_start`
/// and `lin_end`. Passing the path endpoints as linearization points gives
/// the standard EKF transition.
pub fn compute_phi_qd(
    lin_start: &ImuState,
    lin_end: Option<&ImuState>,
    path_start: &ImuState,
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    noise: &ImuNoise,
    g: &Vec3,
) -> Result<Transition> {
    let mut tr = transition_inner(path_start, samples, t0, t1, g, Some(noise))?;
    let end = lin_end.cloned().unwrap_or_else(|| tr.end.clone());
    endpoint_blocks(&mut tr.phi, lin_start, &end, t1 - t0, g);
    Ok(tr)
}

/// Propagate the filter to `t1`, updating the covariance and recording the
/// propagated prior in the first-estimate ledger.
///
/// With `fej` the transition starts from the first estimate of the current
/// step instead of the (possibly updated) current estimate.
pub fn propagate(state: &mut FilterState, samples: &[ImuSample], t1: f64, noise: &ImuNoise, fej: bool) -> Result<Transition> {
    let t0 = state.stamp;
    let lin_start = if fej { state.imu_first_estimate().clone() } else { state.imu.clone() };
    let g = state.gravity;
    let tr = compute_phi_qd(&lin_start, None, &state.imu, samples, t0, t1, noise, &g)?;

    let n = state.dim();
    let phi = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, tr.phi.as_slice());
    let qd = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, tr.qd.as_slice());
    let pii = state.cov.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
    let new_pii = &phi * pii * phi.transpose() + qd;
    state.cov.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&new_pii);
    if n > IMU_DIM {
        let pir = state.cov.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
        let new_pir = &phi * pir;
        state.cov.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_pir);
        state.cov.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_pir.transpose());
    }
    state.symmetrize();

    state.imu = tr.end.clone();
    state.imu.q = state.imu.q.normalized();
    state.stamp = t1;
    let step = state.advance_step();
    state.fej.record(FejKey::Imu(step), FejValue::Imu(state.imu.clone()))?;
    Ok(tr)
}

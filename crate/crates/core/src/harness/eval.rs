use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::mathx::{quat_to_rot, so3_log, Vec3};
use crate::sim::GroundTruthRecord;

use super::pipeline::{global_orientation_cov, Epoch};

/// Errors and consistency measures at one stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub stamp: f64,
    /// Orientation error in the global frame (roll, pitch, yaw components), rad.
    pub ori_err: Vec3,
    pub pos_err: Vec3,
    /// 1σ per component, same frames as the errors.
    pub ori_sigma: Vec3,
    pub pos_sigma: Vec3,
    /// `None` when the covariance block is singular.
    pub nees_ori: Option<f64>,
    pub nees_pos: Option<f64>,
    pub initialized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSeries {
    pub points: Vec<EvalPoint>,
    pub init_stamp: Option<f64>,
}

pub fn nees(err: &Vec3, cov: &Matrix3<f64>) -> Option<f64> {
    let chol = cov.cholesky()?;
    Some(err.dot(&chol.solve(err)))
}

fn truth_at(gt: &[GroundTruthRecord], t: f64) -> Option<&GroundTruthRecord> {
    let k = gt.partition_point(|g| g.stamp < t - 1e-9);
    gt.get(k).filter(|g| (g.stamp - t).abs() < 1e-6)
}

/// Per-stamp errors in the filter's error convention: `R = exp(-θ̃) R̂`.
pub fn evaluate(epochs: &[Epoch], gt: &[GroundTruthRecord]) -> Result<EvalSeries> {
    let mut points = Vec::with_capacity(epochs.len());
    for e in epochs {
        let s = &e.snapshot;
        let Some(g) = truth_at(gt, s.stamp) else { continue };
        let r_hat = quat_to_rot(&s.imu.q)?;
        let r_true = quat_to_rot(&g.q)?;
        let theta = -so3_log(&(r_true * r_hat.transpose()));
        let pos_err = g.p - s.imu.p;
        let cov_g = global_orientation_cov(&s.imu.q, &e.p_theta)?;
        points.push(EvalPoint {
            stamp: s.stamp,
            ori_err: r_hat.transpose() * theta,
            pos_err,
            ori_sigma: cov_g.diagonal().map(|v| v.max(0.0).sqrt()),
            pos_sigma: e.p_pos.diagonal().map(|v| v.max(0.0).sqrt()),
            nees_ori: nees(&theta, &e.p_theta),
            nees_pos: nees(&pos_err, &e.p_pos),
            initialized: e.initialized,
        });
    }
    let init_stamp = epochs.iter().find(|e| e.initialized).map(|e| e.snapshot.stamp);
    Ok(EvalSeries { points, init_stamp })
}

impl EvalSeries {
    /// Mean orientation and position NEES over stamps after anchor
    /// initialization (all stamps when there was none).
    pub fn mean_nees(&self, after_init: bool) -> (f64, f64) {
        let sel: Vec<&EvalPoint> = self.points.iter().filter(|p| !after_init || self.init_stamp.is_none() || p.initialized).collect();
        let mean = |f: &dyn Fn(&EvalPoint) -> Option<f64>| {
            let v: Vec<f64> = sel.iter().filter_map(|p| f(p)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        (mean(&|p| p.nees_ori), mean(&|p| p.nees_pos))
    }

    /// Fractional drop of the yaw 1σ within `window` seconds after
    /// initialization, relative to the last value before it.
    pub fn yaw_sigma_drop(&self, window: f64) -> Option<f64> {
        let t0 = self.init_stamp?;
        let before = self.points.iter().rev().find(|p| p.stamp < t0)?.ori_sigma.z;
        let min_after = self
            .points
            .iter()
            .filter(|p| p.stamp >= t0 && p.stamp <= t0 + window)
            .map(|p| p.ori_sigma.z)
            .fold(f64::INFINITY, f64::min);
        min_after.is_finite().then(|| 1.0 - min_after / before)
    }
}

/// Absolute trajectory error: RMSE of positions after the best rigid alignment.
pub fn compute_ate(estimate: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.len() < 2 {
        return Err(Error::Degenerate("ATE needs two or more paired poses".into()));
    }
    let n = estimate.len() as f64;
    let me = estimate.iter().sum::<Vec3>() / n;
    let mt = truth.iter().sum::<Vec3>() / n;
    let spread = truth.iter().map(|p| (p - mt).norm_squared()).sum::<f64>();
    if spread < 1e-18 {
        return Err(Error::Degenerate("all poses coincide".into()));
    }
    let mut cov = Matrix3::zeros();
    for (e, t) in estimate.iter().zip(truth) {
        cov += (t - mt) * (e - me).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let sq: f64 = estimate.iter().zip(truth).map(|(e, t)| (rot * (e - me) + mt - t).norm_squared()).sum();
    Ok((sq / n).sqrt())
}

pub fn run_ate(epochs: &[Epoch], gt: &[GroundTruthRecord]) -> Result<f64> {
    let (mut est, mut tru) = (Vec::new(), Vec::new());
    for e in epochs {
        if let Some(g) = truth_at(gt, e.snapshot.stamp) {
            est.push(e.snapshot.imu.p);
            tru.push(g.p);
        }
    }
    compute_ate(&est, &tru)
}

/// Per-stamp mean over runs of the NEES series (runs share camera stamps).
pub fn mean_nees_series(series: &[EvalSeries]) -> Vec<(f64, f64, f64)> {
    let Some(first) = series.first() else { return Vec::new() };
    first
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mut so, mut sp, mut no, mut np) = (0.0, 0.0, 0, 0);
            for s in series {
                if let Some(q) = s.points.get(i) {
                    if let Some(v) = q.nees_ori {
                        so += v;
                        no += 1;
                    }
                    if let Some(v) = q.nees_pos {
                        sp += v;
                        np += 1;
                    }
                }
            }
            (p.stamp, so / no.max(1) as f64, sp / np.max(1) as f64)
        })
        .collect()
}

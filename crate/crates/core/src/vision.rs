//! Monocular feature model: projection, triangulation and the MSCKF update.
//!
//! Measurements are normalized image coordinates `(x/z, y/z)` in the camera
//! frame. A feature `p_f` maps into the camera as
//! `p_C = R_CI (R (p_f - p_I) - p_IC)`, with `R` the global-to-IMU rotation
//! and `p_IC` the camera centre in the IMU frame.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::mathx::{givens_triangularize, skew, Mat3, Rot3, Vec3};
use crate::state::{FilterState, Measurement, Pose, THETA};

pub type Vec2 = Vector2<f64>;
pub type Mat23 = Matrix2x3<f64>;

pub const Z_MIN: f64 = 0.1;
pub const BASELINE_MIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// IMU-to-camera rotation.
    pub r_ci: Rot3,
    /// Camera centre in the IMU frame.
    pub p_ic: Vec3,
    /// Standard deviation of a normalized-coordinate measurement.
    pub sigma: f64,
}

impl Default for Camera {
    fn default() -> Self {
        // Camera looks along the IMU x axis; image x is -y_I and image y is -z_I.
        Camera {
            r_ci: Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            p_ic: Vec3::new(0.1, -0.05, 0.08),
            sigma: 1.0 / 460.0,
        }
    }
}

impl Camera {
    pub fn to_camera(&self, pose: &Pose, p_f: &Vec3) -> Vec3 {
        self.r_ci * (pose.rot() * (p_f - pose.p) - self.p_ic)
    }

    /// Camera centre in the global frame.
    pub fn centre(&self, pose: &Pose) -> Vec3 {
        pose.p + pose.rot().transpose() * self.p_ic
    }

    /// Unit bearing of a normalized measurement, in the global frame.
    pub fn bearing(&self, pose: &Pose, z: &Vec2) -> Vec3 {
        (pose.rot().transpose() * self.r_ci.transpose() * Vec3::new(z.x, z.y, 1.0)).normalize()
    }

    pub fn project(&self, pose: &Pose, p_f: &Vec3) -> Result<Vec2> {
        let pc = self.to_camera(pose, p_f);
        if pc.z < Z_MIN {
            return Err(Error::Cheirality(pc.z));
        }
        Ok(Vec2::new(pc.x / pc.z, pc.y / pc.z))
    }

    /// Jacobians of the projection with respect to the pose orientation and
    /// position errors and the feature position.
    pub fn jacobians(&self, pose: &Pose, p_f: &Vec3) -> Result<VisualJacobians> {
        let r = pose.rot();
        let pc = self.to_camera(pose, p_f);
        if pc.z < Z_MIN {
            return Err(Error::Cheirality(pc.z));
        }
        let iz = 1.0 / pc.z;
        let proj = Mat23::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
        let d_pf = self.r_ci * r;
        Ok(VisualJacobians {
            theta: proj * self.r_ci * skew(&(r * (p_f - pose.p))),
            pos: -proj * d_pf,
            feature: proj * d_pf,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualJacobians {
    pub theta: Mat23,
    pub pos: Mat23,
    pub feature: Mat23,
}

/// Observations of one feature, keyed by clone id.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub obs: Vec<(u64, Vec2)>,
}

/// Linear bearing-intersection estimate refined by Gauss-Newton on the
/// reprojection error.
pub fn triangulate(cam: &Camera, views: &[(Pose, Vec2)]) -> Result<Vec3> {
    if views.len() < 2 {
        return Err(Error::TrackRejected("fewer than two views".into()));
    }
    let centres: Vec<Vec3> = views.iter().map(|(p, _)| cam.centre(p)).collect();
    let baseline = centres
        .iter()
        .flat_map(|a| centres.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    if baseline < BASELINE_MIN {
        return Err(Error::TrackRejected(format!("baseline {baseline:.3} m")));
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for ((pose, z), c) in views.iter().zip(&centres) {
        let u = cam.bearing(pose, z);
        let m = Mat3::identity() - u * u.transpose();
        a += m;
        b += m * c;
    }
    let eig = a.symmetric_eigen().eigenvalues;
    let cond = eig.max() / eig.min().max(f64::MIN_POSITIVE);
    if !(cond < 1e8) {
        return Err(Error::TrackRejected(format!("ill-conditioned intersection ({cond:.1e})")));
    }
    let mut p = a.lu().solve(&b).ok_or_else(|| Error::TrackRejected("singular intersection".into()))?;

    for _ in 0..10 {
        let mut jtj = Mat3::zeros();
        let mut jtr = Vec3::zeros();
        for (pose, z) in views {
            let pc = cam.to_camera(pose, &p);
            if pc.z < Z_MIN {
                return Err(Error::TrackRejected("feature behind a view".into()));
            }
            let jac = cam.jacobians(pose, &p)?.feature;
            let res = z - Vec2::new(pc.x / pc.z, pc.y / pc.z);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }
        let step = jtj.lu().solve(&jtr).ok_or_else(|| Error::TrackRejected("singular refinement".into()))?;
        p += step;
        if step.norm() < 1e-10 * p.norm().max(1.0) {
            break;
        }
    }
    for (pose, _) in views {
        if cam.to_camera(pose, &p).z < Z_MIN {
            return Err(Error::TrackRejected("feature behind a view".into()));
        }
    }
    Ok(p)
}

/// 95% chi-square quantile.
pub fn chi2_95(dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(0.95)
}

/// Null-space-projected rows for one track, over the clone columns of the
/// state. Returns the measurement without gating.
pub fn track_measurement(state: &FilterState, cam: &Camera, track: &Track, fej: bool) -> Result<Measurement> {
    let mut views = Vec::with_capacity(track.obs.len());
    let mut cols = Vec::new();
    let mut lin = Vec::new();
    for (cid, z) in &track.obs {
        let clone = state.clone_pose(*cid).ok_or_else(|| Error::TrackRejected(format!("clone {cid} not in state")))?;
        views.push((clone.pose, *z));
        let (off, _) = state.block(crate::state::BlockId::Clone(*cid)).expect("clone present");
        cols.push(off);
        lin.push(state.clone_linearization(*cid, fej).expect("clone present"));
    }
    let p_f = triangulate(cam, &views)?;

    let n = views.len();
    let k = cols.len();
    let mut hx = DMatrix::zeros(2 * n, 6 * k);
    let mut hf = DMatrix::zeros(2 * n, 3);
    let mut r = DVector::zeros(2 * n);
    for (i, ((pose, z), lp)) in views.iter().zip(&lin).enumerate() {
        let zhat = cam.project(pose, &p_f).map_err(|e| Error::TrackRejected(e.to_string()))?;
        let res = z - zhat;
        r[2 * i] = res.x;
        r[2 * i + 1] = res.y;
        let j = cam.jacobians(lp, &p_f).map_err(|e| Error::TrackRejected(e.to_string()))?;
        hx.view_mut((2 * i, 6 * i + THETA), (2, 3)).copy_from(&j.theta);
        hx.view_mut((2 * i, 6 * i + 3), (2, 3)).copy_from(&j.pos);
        hf.view_mut((2 * i, 0), (2, 3)).copy_from(&j.feature);
    }
    // Left null space of H_f: triangularize it and keep the rows below its rank.
    givens_triangularize(&mut hf, &mut [&mut hx, &mut r]);
    let rows = 2 * n - 3;
    let hx = hx.rows(3, rows).into_owned();
    let r = r.rows(3, rows).into_owned();

    let mut full_cols = Vec::with_capacity(6 * k);
    for off in &cols {
        full_cols.extend(*off + THETA..*off + THETA + 3);
        full_cols.extend(*off + 3..*off + 6);
    }
    Ok(Measurement { cols: full_cols, h: hx, residual: r, noise_var: DVector::from_element(rows, cam.sigma * cam.sigma) })
}

/// Merge measurements over the union of their columns.
pub fn stack(ms: &[Measurement]) -> Option<Measurement> {
    if ms.is_empty() {
        return None;
    }
    let mut cols: Vec<usize> = ms.iter().flat_map(|m| m.cols.iter().copied()).collect();
    cols.sort_unstable();
    cols.dedup();
    let rows: usize = ms.iter().map(|m| m.rows()).sum();
    let mut h = DMatrix::zeros(rows, cols.len());
    let mut r = DVector::zeros(rows);
    let mut nv = DVector::zeros(rows);
    let mut row = 0;
    for m in ms {
        for (j, c) in m.cols.iter().enumerate() {
            let dst = cols.binary_search(c).expect("column in union");
            for i in 0..m.rows() {
                h[(row + i, dst)] += m.h[(i, j)];
            }
        }
        r.rows_mut(row, m.rows()).copy_from(&m.residual);
        nv.rows_mut(row, m.rows()).copy_from(&m.noise_var);
        row += m.rows();
    }
    Some(Measurement { cols, h, residual: r, noise_var: nv })
}

/// Thin-QR compression of a measurement with isotropic noise; a no-op when
/// there are no more rows than columns.
pub fn compress(m: Measurement) -> Measurement {
    let (rows, ncols) = m.h.shape();
    if rows <= ncols {
        return m;
    }
    let sigma2 = m.noise_var[0];
    debug_assert!(m.noise_var.iter().all(|v| (v - sigma2).abs() <= 1e-12 * sigma2));
    let qr = m.h.clone().qr();
    let q = qr.q();
    let residual = q.transpose() * &m.residual;
    Measurement { cols: m.cols, h: qr.r(), residual, noise_var: DVector::from_element(ncols, sigma2) }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisualStats {
    pub used: usize,
    pub rejected: usize,
    pub gated: usize,
}

/// Gate each track, then apply one stacked, compressed MSCKF update.
pub fn msckf_update(state: &mut FilterState, cam: &Camera, tracks: &[Track], fej: bool) -> Result<VisualStats> {
    let mut stats = VisualStats::default();
    let mut accepted = Vec::new();
    for t in tracks {
        if t.obs.len() < 2 {
            stats.rejected += 1;
            continue;
        }
        let m = match track_measurement(state, cam, t, fej) {
            Ok(m) => m,
            Err(Error::TrackRejected(_)) => {
                stats.rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let chi2 = state.innovation_chi2(&m)?;
        if chi2 > chi2_95(m.rows()) {
            stats.gated += 1;
            continue;
        }
        stats.used += 1;
        accepted.push(m);
    }
    if let Some(m) = stack(&accepted) {
        state.ekf_update(&compress(m))?;
    }
    Ok(stats)
}

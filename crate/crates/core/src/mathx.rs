//! SO(3) and quaternion kernels plus Givens row rotations.
//!
//! Quaternions use the Hamilton convention with components `(x, y, z, w)`.
//! An orientation stored in the filter is a global-to-IMU rotation, obtained
//! exclusively through [`quat_to_rot`].

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rot3 = Matrix3<f64>;

/// Below this angle the Rodrigues terms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Quat { x, y, z, w }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quat::new(self.x / n, self.y / n, self.z / n, self.w / n)
    }

    /// Quaternion whose rotation matrix is `rot`, with non-negative `w`.
    pub fn from_rot(rot: &Rot3) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rot));
        let c = uq.quaternion().coords;
        let q = Quat::new(c[0], c[1], c[2], c[3]);
        if q.w < 0.0 {
            Quat::new(-q.x, -q.y, -q.z, -q.w)
        } else {
            q
        }
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn quat_to_rot(q: &Quat) -> Result<Rot3> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitQuaternion(n));
    }
    let Quat { x, y, z, w } = q.normalized();
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

pub fn rot_to_quat(r: &Rot3) -> Quat {
    Quat::from_rot(r)
}

/// Rodrigues exponential.
pub fn so3_exp(theta: &Vec3) -> Rot3 {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Mat3::identity() + a * k + b * k * k
}

/// Inverse of [`so3_exp`] on rotation angles in `[0, π]`.
pub fn so3_log(r: &Rot3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < SMALL_ANGLE {
        return 0.5 * vee;
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // Near a half turn the antisymmetric part vanishes; read the axis off R + I.
        let b = (r + Mat3::identity()) * 0.5;
        let (i, _) = (0..3)
            .map(|i| (i, b[(i, i)]))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut axis = b.column(i).into_owned() / b[(i, i)].max(1e-300).sqrt();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return angle * axis;
    }
    angle / (2.0 * angle.sin()) * vee
}

/// Project a nearly orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Mat3) -> Rot3 {
    quat_to_rot(&Quat::from_rot(r).normalized()).expect("normalized quaternion")
}

/// A plane rotation `[c s; -s c]` acting on a pair of rows.
#[derive(Clone, Copy, Debug)]
pub struct Givens {
    pub c: f64,
    pub s: f64,
}

impl Givens {
    /// Rotation mapping `(a, b)` to `(hypot(a, b), 0)`.
    pub fn zeroing(a: f64, b: f64) -> Self {
        if b == 0.0 {
            return Givens { c: 1.0, s: 0.0 };
        }
        let r = a.hypot(b);
        Givens { c: a / r, s: b / r }
    }
}

pub trait RowRotate {
    fn rotate_rows(&mut self, i: usize, j: usize, g: Givens);
}

impl RowRotate for DMatrix<f64> {
    fn rotate_rows(&mut self, i: usize, j: usize, g: Givens) {
        for col in 0..self.ncols() {
            let a = self[(i, col)];
            let b = self[(j, col)];
            self[(i, col)] = g.c * a + g.s * b;
            self[(j, col)] = -g.s * a + g.c * b;
        }
    }
}

impl RowRotate for DVector<f64> {
    fn rotate_rows(&mut self, i: usize, j: usize, g: Givens) {
        let a = self[i];
        let b = self[j];
        self[i] = g.c * a + g.s * b;
        self[j] = -g.s * a + g.c * b;
    }
}

/// Reduce `a` to upper-triangular form with Givens rotations, applying the
/// same orthogonal transform to every matrix in `others`.
pub fn givens_triangularize(a: &mut DMatrix<f64>, others: &mut [&mut dyn RowRotate]) {
    let (m, n) = a.shape();
    for col in 0..n.min(m) {
        for row in (col + 1..m).rev() {
            let b = a[(row, col)];
            if b == 0.0 {
                continue;
            }
            let g = Givens::zeroing(a[(row - 1, col)], b);
            // Only columns from `col` onward are non-zero in these rows.
            for c in col..n {
                let x = a[(row - 1, c)];
                let y = a[(row, c)];
                a[(row - 1, c)] = g.c * x + g.s * y;
                a[(row, c)] = -g.s * x + g.c * y;
            }
            a[(row, col)] = 0.0;
            for o in others.iter_mut() {
                o.rotate_rows(row - 1, row, g);
            }
        }
    }
}

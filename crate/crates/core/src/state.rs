//! Stacked filter state, joint covariance and the first-estimate ledger.
//!
//! Error-state layout, fixed for the whole crate:
//!
//! ```text
//! [ imu (15) | features (3 each) | anchors (3 each) | short window (6 each) | long window (6 each) ]
//! imu   = [ θ | b_g | v | b_a | p ]
//! clone = [ θ | p ]
//! ```
//!
//! Orientation errors follow `R = exp(-θ̃) R̂` for a global-to-IMU rotation `R`,
//! so a correction `δθ` is applied as `R̂ ← exp(-δθ) R̂`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{quat_to_rot, so3_exp, Quat, Rot3, Vec3};

pub const IMU_DIM: usize = 15;
pub const THETA: usize = 0;
pub const BG: usize = 3;
pub const VEL: usize = 6;
pub const BA: usize = 9;
pub const POS: usize = 12;
pub const CLONE_DIM: usize = 6;

/// Global-to-IMU orientation and IMU position in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub q: Quat,
    pub p: Vec3,
}

impl Pose {
    pub fn new(rot: &Rot3, p: Vec3) -> Self {
        Pose { q: Quat::from_rot(rot), p }
    }

    pub fn identity() -> Self {
        Pose { q: Quat::IDENTITY, p: Vec3::zeros() }
    }

    pub fn rot(&self) -> Rot3 {
        quat_to_rot(&self.q).expect("state quaternions are kept unit")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub q: Quat,
    pub bg: Vec3,
    pub v: Vec3,
    pub ba: Vec3,
    pub p: Vec3,
}

impl ImuState {
    pub fn at_rest(pose: Pose) -> Self {
        ImuState { q: pose.q, bg: Vec3::zeros(), v: Vec3::zeros(), ba: Vec3::zeros(), p: pose.p }
    }

    pub fn rot(&self) -> Rot3 {
        quat_to_rot(&self.q).expect("state quaternions are kept unit")
    }

    pub fn set_rot(&mut self, r: &Rot3) {
        self.q = Quat::from_rot(r);
    }

    pub fn pose(&self) -> Pose {
        Pose { q: self.q, p: self.p }
    }

    /// `self ⊞ delta` for a 15-dim IMU error vector.
    pub fn boxplus(&self, delta: &[f64]) -> ImuState {
        let mut out = self.clone();
        let dth = Vec3::new(delta[THETA], delta[THETA + 1], delta[THETA + 2]);
        out.set_rot(&(so3_exp(&-dth) * self.rot()));
        out.q = out.q.normalized();
        for i in 0..3 {
            out.bg[i] += delta[BG + i];
            out.v[i] += delta[VEL + i];
            out.ba[i] += delta[BA + i];
            out.p[i] += delta[POS + i];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClonePose {
    pub id: u64,
    pub pose: Pose,
    pub stamp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState {
    pub id: u32,
    pub p: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlamFeature {
    pub id: u64,
    pub p: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockId {
    Imu,
    Feature(u64),
    Anchor(u32),
    Clone(u64),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Imu => write!(f, "imu"),
            BlockId::Feature(id) => write!(f, "feature {id}"),
            BlockId::Anchor(id) => write!(f, "anchor {id}"),
            BlockId::Clone(id) => write!(f, "clone {id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FejKey {
    /// IMU state at the end of propagation step `n`.
    Imu(u64),
    Clone(u64),
    Anchor(u32),
    Feature(u64),
}

impl fmt::Display for FejKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FejValue {
    Imu(ImuState),
    Pose(Pose),
    Point(Vec3),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FejEntry {
    pub value: FejValue,
    pub active: bool,
}

/// Write-once record of the first estimate of every state block.
#[derive(Clone, Debug, Default)]
pub struct FejLedger {
    entries: BTreeMap<FejKey, FejEntry>,
}

impl FejLedger {
    pub fn record(&mut self, key: FejKey, value: FejValue) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(Error::FejOverwrite(key.to_string()));
        }
        self.entries.insert(key, FejEntry { value, active: true });
        Ok(())
    }

    pub fn get(&self, key: &FejKey) -> Option<&FejEntry> {
        self.entries.get(key)
    }

    pub fn deactivate(&mut self, key: &FejKey) {
        if let Some(e) = self.entries.get_mut(key) {
            e.active = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn imu(&self, step: u64) -> Option<&ImuState> {
        match self.entries.get(&FejKey::Imu(step)).map(|e| &e.value) {
            Some(FejValue::Imu(s)) => Some(s),
            _ => None,
        }
    }

    pub fn pose(&self, key: &FejKey) -> Option<Pose> {
        match self.entries.get(key).map(|e| &e.value) {
            Some(FejValue::Pose(p)) => Some(*p),
            Some(FejValue::Imu(s)) => Some(s.pose()),
            _ => None,
        }
    }

    pub fn point(&self, key: &FejKey) -> Option<Vec3> {
        match self.entries.get(key).map(|e| &e.value) {
            Some(FejValue::Point(p)) => Some(*p),
            _ => None,
        }
    }
}

/// A linear measurement over a subset of error-state columns.
#[derive(Clone, Debug)]
pub struct Measurement {
    /// Full-state column index of each column of `h`.
    pub cols: Vec<usize>,
    pub h: DMatrix<f64>,
    pub residual: DVector<f64>,
    pub noise_var: DVector<f64>,
}

impl Measurement {
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct FilterState {
    pub stamp: f64,
    pub imu: ImuState,
    pub features: Vec<SlamFeature>,
    pub anchors: Vec<AnchorState>,
    pub short_window: Vec<ClonePose>,
    pub long_window: Vec<ClonePose>,
    pub cov: DMatrix<f64>,
    pub gravity: Vec3,
    pub fej: FejLedger,
    pub max_short: usize,
    pub max_long: usize,
    step: u64,
    next_clone_id: u64,
}

impl FilterState {
    pub fn new(stamp: f64, imu: ImuState, imu_cov: DMatrix<f64>, gravity: Vec3) -> Result<Self> {
        if imu_cov.shape() != (IMU_DIM, IMU_DIM) {
            return Err(Error::Dimension(format!("IMU covariance is {:?}", imu_cov.shape())));
        }
        let mut fej = FejLedger::default();
        fej.record(FejKey::Imu(0), FejValue::Imu(imu.clone()))?;
        let mut s = FilterState {
            stamp,
            imu,
            features: Vec::new(),
            anchors: Vec::new(),
            short_window: Vec::new(),
            long_window: Vec::new(),
            cov: imu_cov,
            gravity,
            fej,
            max_short: 11,
            max_long: 400,
            step: 0,
            next_clone_id: 0,
        };
        s.symmetrize();
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        IMU_DIM
            + 3 * self.features.len()
            + 3 * self.anchors.len()
            + CLONE_DIM * (self.short_window.len() + self.long_window.len())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn feature_offset(&self, idx: usize) -> usize {
        IMU_DIM + 3 * idx
    }

    pub fn anchor_offset(&self, idx: usize) -> usize {
        IMU_DIM + 3 * self.features.len() + 3 * idx
    }

    pub fn short_offset(&self, idx: usize) -> usize {
        self.anchor_offset(self.anchors.len()) + CLONE_DIM * idx
    }

    pub fn long_offset(&self, idx: usize) -> usize {
        self.short_offset(self.short_window.len()) + CLONE_DIM * idx
    }

    /// `(offset, length)` of a block in the error state.
    pub fn block(&self, id: BlockId) -> Option<(usize, usize)> {
        match id {
            BlockId::Imu => Some((0, IMU_DIM)),
            BlockId::Feature(f) => {
                self.features.iter().position(|x| x.id == f).map(|i| (self.feature_offset(i), 3))
            }
            BlockId::Anchor(a) => {
                self.anchors.iter().position(|x| x.id == a).map(|i| (self.anchor_offset(i), 3))
            }
            BlockId::Clone(c) => {
                if let Some(i) = self.short_window.iter().position(|x| x.id == c) {
                    Some((self.short_offset(i), CLONE_DIM))
                } else {
                    self.long_window.iter().position(|x| x.id == c).map(|i| (self.long_offset(i), CLONE_DIM))
                }
            }
        }
    }

    pub fn clone_pose(&self, id: u64) -> Option<&ClonePose> {
        self.short_window.iter().chain(self.long_window.iter()).find(|c| c.id == id)
    }

    pub fn anchor(&self, id: u32) -> Option<&AnchorState> {
        self.anchors.iter().find(|a| a.id == id)
    }

    /// First estimate of the current IMU state (the propagated prior of this step).
    pub fn imu_first_estimate(&self) -> &ImuState {
        self.fej.imu(self.step).unwrap_or(&self.imu)
    }

    /// Pose at which Jacobians involving the current IMU pose are evaluated.
    pub fn imu_linearization(&self, fej: bool) -> Pose {
        if fej {
            self.imu_first_estimate().pose()
        } else {
            self.imu.pose()
        }
    }

    pub fn clone_linearization(&self, id: u64, fej: bool) -> Option<Pose> {
        let current = self.clone_pose(id)?.pose;
        if fej {
            Some(self.fej.pose(&FejKey::Clone(id)).unwrap_or(current))
        } else {
            Some(current)
        }
    }

    pub fn anchor_linearization(&self, id: u32, fej: bool) -> Option<Vec3> {
        let current = self.anchor(id)?.p;
        if fej {
            Some(self.fej.point(&FejKey::Anchor(id)).unwrap_or(current))
        } else {
            Some(current)
        }
    }

    pub fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov += t;
        self.cov *= 0.5;
    }

    /// Copy the current IMU pose into a window, growing the covariance with
    /// duplicated pose rows and columns.
    pub fn clone_current_pose(&mut self, stamp: f64, target: Window) -> Result<u64> {
        let (window, cap) = match target {
            Window::Short => (&self.short_window, self.max_short),
            Window::Long => (&self.long_window, self.max_long),
        };
        if let Some(last) = window.last() {
            if !(stamp > last.stamp) {
                return Err(Error::NonMonotoneStamp { prev: last.stamp, next: stamp });
            }
        }
        if cap == 0 {
            return Err(Error::Dimension("window capacity is zero".into()));
        }
        if window.len() >= cap {
            let oldest = window[0].id;
            self.marginalize(BlockId::Clone(oldest))?;
        }

        let idx = [THETA, THETA + 1, THETA + 2, POS, POS + 1, POS + 2];
        let cross = self.cov.select_rows(idx.iter());
        let diag = cross.select_columns(idx.iter());
        let at = match target {
            Window::Short => self.short_offset(self.short_window.len()),
            Window::Long => self.dim(),
        };
        self.cov = insert_block(&self.cov, at, &cross, &diag);

        let id = self.next_clone_id;
        self.next_clone_id += 1;
        let first = self.imu_first_estimate().pose();
        let clone = ClonePose { id, pose: self.imu.pose(), stamp };
        match target {
            Window::Short => self.short_window.push(clone),
            Window::Long => self.long_window.push(clone),
        }
        self.fej.record(FejKey::Clone(id), FejValue::Pose(first))?;
        self.symmetrize();
        Ok(id)
    }

    /// Insert anchors between the features and the short window.
    ///
    /// `paa` is the joint `3A × 3A` anchor covariance and `pxa` the
    /// `dim × 3A` cross-covariance against the current error state.
    pub fn augment_anchors(&mut self, anchors: &[(u32, Vec3)], paa: &DMatrix<f64>, pxa: &DMatrix<f64>) -> Result<()> {
        if !self.anchors.is_empty() {
            return Err(Error::Dimension("anchors already present".into()));
        }
        let k = 3 * anchors.len();
        if paa.shape() != (k, k) || pxa.shape() != (self.dim(), k) {
            return Err(Error::Dimension(format!(
                "paa {:?}, pxa {:?} for {} anchors and state dim {}",
                paa.shape(),
                pxa.shape(),
                anchors.len(),
                self.dim()
            )));
        }
        let mut ids: Vec<u32> = anchors.iter().map(|a| a.0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != anchors.len() {
            return Err(Error::Dimension("duplicate anchor ids".into()));
        }
        check_psd(paa, "anchor covariance")?;

        let at = self.anchor_offset(0);
        self.cov = insert_block(&self.cov, at, &pxa.transpose(), paa);
        for (id, p) in anchors {
            self.anchors.push(AnchorState { id: *id, p: *p });
            self.fej.record(FejKey::Anchor(*id), FejValue::Point(*p))?;
        }
        self.symmetrize();
        Ok(())
    }

    /// Insert a persistent feature at the end of the feature block.
    pub fn augment_feature(&mut self, id: u64, p: Vec3, pff: &DMatrix<f64>, pxf: &DMatrix<f64>) -> Result<()> {
        if pff.shape() != (3, 3) || pxf.shape() != (self.dim(), 3) {
            return Err(Error::Dimension("feature covariance blocks".into()));
        }
        if self.features.iter().any(|f| f.id == id) {
            return Err(Error::Dimension(format!("feature {id} already in state")));
        }
        check_psd(pff, "feature covariance")?;
        let at = self.feature_offset(self.features.len());
        self.cov = insert_block(&self.cov, at, &pxf.transpose(), pff);
        self.features.push(SlamFeature { id, p });
        self.fej.record(FejKey::Feature(id), FejValue::Point(p))?;
        self.symmetrize();
        Ok(())
    }

    pub fn marginalize(&mut self, id: BlockId) -> Result<()> {
        let (at, len) = match id {
            BlockId::Imu | BlockId::Anchor(_) => return Err(Error::InvalidMarginalization(id.to_string())),
            _ => self.block(id).ok_or_else(|| Error::InvalidMarginalization(format!("{id} not in state")))?,
        };
        let cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0));
        self.cov = cov.remove_rows(at, len).remove_columns(at, len);
        match id {
            BlockId::Feature(f) => {
                self.features.retain(|x| x.id != f);
                self.fej.deactivate(&FejKey::Feature(f));
            }
            BlockId::Clone(c) => {
                self.short_window.retain(|x| x.id != c);
                self.long_window.retain(|x| x.id != c);
                self.fej.deactivate(&FejKey::Clone(c));
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn marginalize_long_window(&mut self) -> Result<()> {
        let ids: Vec<u64> = self.long_window.iter().map(|c| c.id).collect();
        for id in ids {
            self.marginalize(BlockId::Clone(id))?;
        }
        Ok(())
    }

    pub fn apply_correction(&mut self, delta: &DVector<f64>) -> Result<()> {
        if delta.len() != self.dim() {
            return Err(Error::Dimension(format!("correction has {} entries, state {}", delta.len(), self.dim())));
        }
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteCorrection);
        }
        let d = delta.as_slice();
        self.imu = self.imu.boxplus(&d[..IMU_DIM]);
        let mut off = IMU_DIM;
        for f in &mut self.features {
            f.p += Vec3::new(d[off], d[off + 1], d[off + 2]);
            off += 3;
        }
        for a in &mut self.anchors {
            a.p += Vec3::new(d[off], d[off + 1], d[off + 2]);
            off += 3;
        }
        for c in self.short_window.iter_mut().chain(self.long_window.iter_mut()) {
            c.pose = pose_boxplus(&c.pose, &d[off..off + CLONE_DIM]);
            off += CLONE_DIM;
        }
        Ok(())
    }

    /// Normalized innovation squared `rᵀ S⁻¹ r`.
    pub fn innovation_chi2(&self, m: &Measurement) -> Result<f64> {
        let p_sub = self.cov.select_rows(m.cols.iter()).select_columns(m.cols.iter());
        let mut s = &m.h * p_sub * m.h.transpose();
        for i in 0..m.rows() {
            s[(i, i)] += m.noise_var[i];
        }
        let chol = s.cholesky().ok_or_else(|| Error::NotPsd("innovation covariance".into()))?;
        let z = chol.l().solve_lower_triangular(&m.residual).expect("cholesky factor is invertible");
        Ok(z.norm_squared())
    }

    /// Standard EKF update; returns the applied correction.
    pub fn ekf_update(&mut self, m: &Measurement) -> Result<DVector<f64>> {
        if m.h.ncols() != m.cols.len() || m.residual.len() != m.rows() || m.noise_var.len() != m.rows() {
            return Err(Error::Dimension("measurement blocks".into()));
        }
        if m.rows() == 0 {
            return Ok(DVector::zeros(self.dim()));
        }
        let pht = self.cov.select_columns(m.cols.iter()) * m.h.transpose();
        let mut s = &m.h * pht.select_rows(m.cols.iter());
        for i in 0..m.rows() {
            s[(i, i)] += m.noise_var[i];
        }
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.cholesky().ok_or_else(|| Error::NotPsd("innovation covariance".into()))?;
        let l = chol.l();
        // W = P Hᵀ L⁻ᵀ, so that K S Kᵀ = W Wᵀ and δ = W L⁻¹ r.
        let wt = l.solve_lower_triangular(&pht.transpose()).expect("cholesky factor is invertible");
        let z = l.solve_lower_triangular(&m.residual).expect("cholesky factor is invertible");
        let delta = wt.transpose() * z;
        self.cov -= wt.transpose() * &wt;
        self.symmetrize();
        self.apply_correction(&delta)?;
        Ok(delta)
    }

    /// `(max |P - Pᵀ| / max |P|, min eigenvalue / trace)`.
    pub fn covariance_health(&self) -> (f64, f64) {
        let scale = self.cov.amax().max(f64::MIN_POSITIVE);
        let asym = (&self.cov - self.cov.transpose()).amax() / scale;
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        (asym, min / self.cov.trace().max(f64::MIN_POSITIVE))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            stamp: self.stamp,
            imu: self.imu.clone(),
            anchors: self.anchors.iter().map(|a| (a.id, a.p)).collect(),
        }
    }
}

pub fn pose_boxplus(pose: &Pose, delta: &[f64]) -> Pose {
    let dth = Vec3::new(delta[0], delta[1], delta[2]);
    let r = so3_exp(&-dth) * pose.rot();
    Pose { q: Quat::from_rot(&r).normalized(), p: pose.p + Vec3::new(delta[3], delta[4], delta[5]) }
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * m.amax().max(1.0) {
        return Err(Error::NotPsd(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues;
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * m.trace().abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min:e}")));
    }
    Ok(())
}

/// Insert `k` new rows/columns at `at`; `cross` is `k × n` in the old ordering.
fn insert_block(cov: &DMatrix<f64>, at: usize, cross: &DMatrix<f64>, diag: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let k = diag.nrows();
    let tail = n - at;
    let mut out = DMatrix::zeros(n + k, n + k);
    out.view_mut((0, 0), (at, at)).copy_from(&cov.view((0, 0), (at, at)));
    out.view_mut((0, at + k), (at, tail)).copy_from(&cov.view((0, at), (at, tail)));
    out.view_mut((at + k, 0), (tail, at)).copy_from(&cov.view((at, 0), (tail, at)));
    out.view_mut((at + k, at + k), (tail, tail)).copy_from(&cov.view((at, at), (tail, tail)));
    out.view_mut((at, 0), (k, at)).copy_from(&cross.view((0, 0), (k, at)));
    out.view_mut((at, at + k), (k, tail)).copy_from(&cross.view((0, at), (k, tail)));
    out.view_mut((0, at), (at, k)).copy_from(&cross.view((0, 0), (k, at)).transpose());
    out.view_mut((at + k, at), (tail, k)).copy_from(&cross.view((0, at), (k, tail)).transpose());
    out.view_mut((at, at), (k, k)).copy_from(diag);
    out
}

/// State record written by the harness.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSnapshot {
    pub stamp: f64,
    pub imu: ImuState,
    pub anchors: Vec<(u32, Vec3)>,
}

impl StateSnapshot {
    pub fn csv_header(anchor_ids: &[u32]) -> String {
        let mut h = String::from("stamp,qx,qy,qz,qw,px,py,pz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz");
        for id in anchor_ids {
            h.push_str(&format!(",a{id}_x,a{id}_y,a{id}_z"));
        }
        h
    }

    /// One CSV row; anchors not yet in the state are written as `nan`.
    pub fn csv_row(&self, anchor_ids: &[u32]) -> String {
        let s = &self.imu;
        let mut fields = vec![format!("{}", self.stamp)];
        for x in [s.q.x, s.q.y, s.q.z, s.q.w] {
            fields.push(format!("{x}"));
        }
        for v in [&s.p, &s.v, &s.bg, &s.ba] {
            for x in v.iter() {
                fields.push(format!("{x}"));
            }
        }
        for id in anchor_ids {
            match self.anchors.iter().find(|a| a.0 == *id) {
                Some((_, p)) => fields.extend(p.iter().map(|x| format!("{x}"))),
                None => fields.extend(std::iter::repeat_n("nan".to_string(), 3)),
            }
        }
        fields.join(",")
    }

    pub fn parse_row(line: &str, anchor_ids: &[u32]) -> Result<StateSnapshot> {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 17 + 3 * anchor_ids.len() {
            return Err(Error::Parse(format!("expected {} fields, got {}", 17 + 3 * anchor_ids.len(), vals.len())));
        }
        let v3 = |i: usize| Vec3::new(vals[i], vals[i + 1], vals[i + 2]);
        let imu = ImuState {
            q: Quat::new(vals[1], vals[2], vals[3], vals[4]),
            p: v3(5),
            v: v3(8),
            bg: v3(11),
            ba: v3(14),
        };
        let anchors = anchor_ids
            .iter()
            .enumerate()
            .map(|(k, id)| (*id, v3(17 + 3 * k)))
            .filter(|(_, p)| p.iter().all(|x| x.is_finite()))
            .collect();
        Ok(StateSnapshot { stamp: vals[0], imu, anchors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_state() -> FilterState {
        let n = IMU_DIM;
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 7) as f64 * 0.01 + if i == j { 0.5 } else { 0.0 });
        let cov = &a * a.transpose();
        let imu = ImuState {
            q: Quat::new(0.1, 0.2, -0.3, 0.9).normalized(),
            bg: Vec3::new(0.01, 0.0, -0.01),
            v: Vec3::new(1.0, 0.5, 0.0),
            ba: Vec3::zeros(),
            p: Vec3::new(2.0, -1.0, 0.5),
        };
        FilterState::new(0.0, imu, cov, Vec3::new(0.0, 0.0, 9.81)).unwrap()
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn clone_duplicates_pose_covariance() {
        let mut s = test_state();
        let before = s.cov.clone();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        let o = s.short_offset(0);
        let idx = [0, 1, 2, 12, 13, 14];
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                assert_eq!(s.cov[(o + a, o + b)], before[(ia, ib)]);
            }
        }
        assert_eq!(s.short_window[0].pose, s.imu.pose());
    }

    #[test]
    fn cloning_twice_gives_identical_blocks() {
        let mut s = test_state();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        s.clone_current_pose(0.2, Window::Short).unwrap();
        let (o1, o2) = (s.short_offset(0), s.short_offset(1));
        let auto = s.cov.view((o1, o1), (6, 6)).into_owned();
        assert_eq!(s.cov.view((o2, o2), (6, 6)).into_owned(), auto);
        assert_eq!(s.cov.view((o1, o2), (6, 6)).into_owned(), auto);
    }

    #[test]
    fn clone_rejects_non_monotone_stamp() {
        let mut s = test_state();
        s.clone_current_pose(0.2, Window::Short).unwrap();
        assert!(matches!(s.clone_current_pose(0.2, Window::Short), Err(Error::NonMonotoneStamp { .. })));
    }

    #[test]
    fn short_window_capped_at_eleven() {
        let mut s = test_state();
        for k in 0..30 {
            s.clone_current_pose(0.1 * (k + 1) as f64, Window::Short).unwrap();
            assert!(s.short_window.len() <= 11);
        }
        assert_eq!(s.short_window.len(), 11);
        assert_eq!(s.dim(), IMU_DIM + 66);
        assert_eq!(s.cov.nrows(), s.dim());
    }

    #[test]
    fn marginalize_is_principal_submatrix() {
        let mut s = test_state();
        let a = s.clone_current_pose(0.1, Window::Short).unwrap();
        s.imu.p.x += 1.0;
        s.cov[(12, 12)] += 0.3;
        s.clone_current_pose(0.2, Window::Short).unwrap();
        let before = s.cov.clone();
        s.marginalize(BlockId::Clone(a)).unwrap();
        let keep: Vec<usize> = (0..15).chain(21..27).collect();
        for (i, &bi) in keep.iter().enumerate() {
            for (j, &bj) in keep.iter().enumerate() {
                assert_eq!(s.cov[(i, j)].to_bits(), before[(bi, bj)].to_bits());
            }
        }
        assert!(!s.fej.get(&FejKey::Clone(a)).unwrap().active);
    }

    #[test]
    fn marginalize_then_reclone_stays_psd() {
        let mut s = test_state();
        let a = s.clone_current_pose(0.1, Window::Short).unwrap();
        s.clone_current_pose(0.2, Window::Short).unwrap();
        s.marginalize(BlockId::Clone(a)).unwrap();
        s.clone_current_pose(0.3, Window::Short).unwrap();
        // Exact duplicates are singular; allow round-off below zero only.
        assert!(min_eig(&s.cov) > -1e-9 * s.cov.trace());
    }

    #[test]
    fn marginalize_imu_is_error() {
        let mut s = test_state();
        assert!(matches!(s.marginalize(BlockId::Imu), Err(Error::InvalidMarginalization(_))));
    }

    #[test]
    fn augment_anchors_block_diagonal() {
        let mut s = test_state();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        let before = s.cov.clone();
        let n = s.dim();
        let paa = DMatrix::identity(9, 9) * 0.04;
        let pxa = DMatrix::zeros(n, 9);
        let anchors = [(0, Vec3::new(1.0, 2.0, 3.0)), (1, Vec3::new(-4.0, 0.0, 1.0)), (2, Vec3::new(0.0, 5.0, 2.0))];
        s.augment_anchors(&anchors, &paa, &pxa).unwrap();
        assert_eq!(s.dim(), n + 9);
        let o = s.anchor_offset(0);
        assert_eq!(o, 15);
        assert_eq!(s.cov.view((o, o), (9, 9)).into_owned(), paa);
        assert_eq!(s.cov.view((0, o), (15, 9)).into_owned(), DMatrix::zeros(15, 9));
        // Existing blocks keep their values, shifted past the anchors.
        assert_eq!(s.cov.view((o + 9, o + 9), (6, 6)).into_owned(), before.view((15, 15), (6, 6)).into_owned());
        assert_relative_eq!((&s.cov - s.cov.transpose()).amax(), 0.0, epsilon = 1e-12);
        assert_eq!(s.fej.point(&FejKey::Anchor(1)), Some(Vec3::new(-4.0, 0.0, 1.0)));
    }

    #[test]
    fn augment_anchors_rejects_bad_input() {
        let mut s = test_state();
        let n = s.dim();
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 1.0]));
        assert!(matches!(
            s.augment_anchors(&[(0, Vec3::zeros())], &bad, &DMatrix::zeros(n, 3)),
            Err(Error::NotPsd(_))
        ));
        assert!(matches!(
            s.augment_anchors(&[(0, Vec3::zeros())], &DMatrix::identity(3, 3), &DMatrix::zeros(n + 1, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn correction_identities() {
        let mut s = test_state();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        let before = s.clone();
        s.apply_correction(&DVector::zeros(s.dim())).unwrap();
        assert_relative_eq!(s.imu.rot(), before.imu.rot(), epsilon = 1e-15);
        assert_eq!(s.imu.p, before.imu.p);

        let mut d = DVector::zeros(s.dim());
        d[POS] = 0.1;
        s.apply_correction(&d).unwrap();
        assert_eq!(s.imu.p, before.imu.p + Vec3::new(0.1, 0.0, 0.0));

        d[0] = f64::NAN;
        assert!(matches!(s.apply_correction(&d), Err(Error::NonFiniteCorrection)));
    }

    #[test]
    fn update_reduces_covariance() {
        let mut s = test_state();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        let before = s.cov.clone();
        let m = Measurement {
            cols: vec![12, 13, 14, 0],
            h: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.5, 0.2, 0.0, 1.0, -0.3, 0.0]),
            residual: DVector::from_vec(vec![0.1, -0.2]),
            noise_var: DVector::from_vec(vec![0.01, 0.02]),
        };
        s.ekf_update(&m).unwrap();
        let diff = &s.cov - &before;
        let max_eig = SymmetricEigen::new(diff).eigenvalues.max();
        assert!(max_eig <= 1e-9 * before.trace());
        let (asym, min) = s.covariance_health();
        assert!(asym < 1e-9 && min > -1e-9);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = test_state();
        s.augment_anchors(&[(3, Vec3::new(1.0, 2.0, 3.0))], &DMatrix::identity(3, 3), &DMatrix::zeros(15, 3)).unwrap();
        let ids = [3, 7];
        let row = s.snapshot().csv_row(&ids);
        let back = StateSnapshot::parse_row(&row, &ids).unwrap();
        assert_eq!(back.anchors.len(), 1);
        assert_relative_eq!(back.imu.p, s.imu.p, epsilon = 1e-9);
        assert_eq!(StateSnapshot::csv_header(&ids).split(',').count(), row.split(',').count());
    }

    proptest! {
        #[test]
        fn fej_entries_are_write_once(id in 0u64..1000, x in -10.0..10.0f64) {
            let mut ledger = FejLedger::default();
            ledger.record(FejKey::Feature(id), FejValue::Point(Vec3::new(x, 0.0, 0.0))).unwrap();
            let second = ledger.record(FejKey::Feature(id), FejValue::Point(Vec3::zeros()));
            prop_assert!(matches!(second, Err(Error::FejOverwrite(_))));
            prop_assert_eq!(ledger.point(&FejKey::Feature(id)), Some(Vec3::new(x, 0.0, 0.0)));
        }

        #[test]
        fn covariance_stays_symmetric_psd(seq in proptest::collection::vec(0u8..3, 1..25)) {
            let mut s = test_state();
            let mut t = 0.0;
            for op in seq {
                t += 0.1;
                match op {
                    0 => { s.clone_current_pose(t, Window::Short).unwrap(); }
                    1 => { s.clone_current_pose(t, Window::Long).unwrap(); }
                    _ => {
                        if let Some(c) = s.short_window.first().map(|c| c.id) {
                            s.marginalize(BlockId::Clone(c)).unwrap();
                        }
                    }
                }
                let (asym, min) = s.covariance_health();
                prop_assert!(asym < 1e-9);
                prop_assert!(min > -1e-9);
            }
        }
    }
}

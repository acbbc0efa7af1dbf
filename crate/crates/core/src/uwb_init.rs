//! Anchor initialization from a long-short keyframe window.
//!
//! Ranges are buffered against keyframe clones. Once enough keyframes exist,
//! each anchor is bootstrapped linearly, all anchors are refined jointly by
//! Gauss-Newton over ranges and echoes, and the anchor covariance and its
//! correlation with the window poses are built from the linearized ranges.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{givens_triangularize, skew, Vec3};
use crate::ranging::{ranging_node, EchoMeasurement, RangeMeasurement, UwbParams};
use crate::state::{BlockId, FilterState, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitParams {
    /// Keyframes required before solving.
    pub n_min: usize,
    /// Distance between consecutive long-window keyframes, m.
    pub keyframe_spacing: f64,
    pub cond_max: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        InitParams { n_min: 50, keyframe_spacing: 0.3, cond_max: 1e8, max_iterations: 20, step_tolerance: 1e-8 }
    }
}

/// Ranges synchronized to one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeRanges {
    pub clone_id: u64,
    /// Pose when the keyframe was taken; superseded by the state's estimate
    /// while the clone is still in the state.
    pub pose: Pose,
    pub ranges: Vec<RangeMeasurement>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitBuffer {
    pub keyframes: Vec<KeyframeRanges>,
    pub echoes: Vec<EchoMeasurement>,
}

impl InitBuffer {
    pub fn push(&mut self, kf: KeyframeRanges) {
        self.keyframes.push(kf);
    }

    /// Keyframes paired with their current pose estimate. With `from_state`
    /// only keyframes whose clone is still in the state are kept.
    pub fn resolve(&self, state: &FilterState, from_state: bool) -> Vec<KeyframeRanges> {
        self.keyframes
            .iter()
            .filter_map(|k| match state.clone_pose(k.clone_id) {
                Some(c) => Some(KeyframeRanges { pose: c.pose, ..k.clone() }),
                None if !from_state => Some(k.clone()),
                None => None,
            })
            .collect()
    }
}

/// `(ranging node, distance)` rows for one anchor.
pub fn anchor_rows(keyframes: &[KeyframeRanges], anchor: u32, params: &UwbParams) -> Vec<(Vec3, f64)> {
    keyframes
        .iter()
        .flat_map(|k| k.ranges.iter().filter(|r| r.anchor == anchor).map(move |r| (ranging_node(&k.pose, params), r.d)))
        .collect()
}

pub fn anchor_ids(keyframes: &[KeyframeRanges]) -> Vec<u32> {
    let mut ids: Vec<u32> = keyframes.iter().flat_map(|k| k.ranges.iter().map(|r| r.anchor)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bootstrap {
    pub anchor: Vec3,
    /// `|D - ‖p_a‖²|` for the auxiliary unknown `D`.
    pub consistency: f64,
    pub condition: f64,
}

/// `Δ = (d - bias)² - ‖p_r‖²`.
pub fn delta(p_r: &Vec3, d: f64, bias: f64) -> f64 {
    (d - bias).powi(2) - p_r.norm_squared()
}

/// Linear least squares on `-2 p_rᵀ p_a + D = Δ` with `D = ‖p_a‖²` free.
pub fn linear_bootstrap(rows: &[(Vec3, f64)], bias: f64, cond_max: f64) -> Result<Bootstrap> {
    if rows.len() < 4 {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let a = DMatrix::from_fn(rows.len(), 4, |i, j| if j < 3 { -2.0 * rows[i].0[j] } else { 1.0 });
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|(p, d)| delta(p, *d, bias)));
    let svd = SVD::new(a, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < cond_max) {
        return Err(Error::IllConditioned(condition));
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let anchor = Vec3::new(x[0], x[1], x[2]);
    Ok(Bootstrap { anchor, consistency: (x[3] - anchor.norm_squared()).abs(), condition })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub anchors: Vec<(u32, Vec3)>,
    pub cost: f64,
    pub iterations: usize,
    /// Gauss-Newton normal matrix `Jᵀ W J` at the solution.
    pub information: DMatrix<f64>,
}

fn joint_cost_and_jacobian(
    ids: &[u32],
    x: &DVector<f64>,
    rows: &BTreeMap<u32, Vec<(Vec3, f64)>>,
    echoes: &[EchoMeasurement],
    params: &UwbParams,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let a = |id: u32| {
        let k = ids.iter().position(|&i| i == id).unwrap();
        (k, Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
    };
    let n = 3 * ids.len();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let mut cost = 0.0;
    let wr = 1.0 / (params.sigma_r * params.sigma_r);
    let we = 1.0 / (params.sigma_e * params.sigma_e);
    for id in ids {
        let (k, pa) = a(*id);
        for (pr, d) in rows.get(id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let diff = pa - pr;
            let dist = diff.norm().max(1e-12);
            let r = d - params.bias - dist;
            let j = diff / dist;
            cost += wr * r * r;
            let mut block = jtj.view_mut((3 * k, 3 * k), (3, 3));
            block += wr * j * j.transpose();
            let mut g = jtr.rows_mut(3 * k, 3);
            g += wr * r * j;
        }
    }
    for e in echoes {
        if !ids.contains(&e.anchor_i) || !ids.contains(&e.anchor_j) || e.anchor_i == e.anchor_j {
            continue;
        }
        let (ki, ai) = a(e.anchor_i);
        let (kj, aj) = a(e.anchor_j);
        let diff = ai - aj;
        let dist = diff.norm().max(1e-12);
        let r = e.d - params.bias - dist;
        let u = diff / dist;
        cost += we * r * r;
        let uu = we * u * u.transpose();
        for (p, sp) in [(ki, 1.0), (kj, -1.0)] {
            for (q, sq) in [(ki, 1.0), (kj, -1.0)] {
                let mut block = jtj.view_mut((3 * p, 3 * q), (3, 3));
                block += uu * (sp * sq);
            }
            let mut g = jtr.rows_mut(3 * p, 3);
            g += we * r * sp * u;
        }
    }
    (cost, jtj, jtr)
}

fn pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = SVD::new(m.clone(), true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(b, tol).expect("SVD has both factors")
}

/// Joint Gauss-Newton over all anchors, ranges weighted by `1/σ_r²` and
/// echoes by `1/σ_e²`. Steps solve the normal equations by pseudo-inverse, so
/// directions with no information are left at the initial guess.
pub fn refine_joint(
    rows: &BTreeMap<u32, Vec<(Vec3, f64)>>,
    echoes: &[EchoMeasurement],
    guesses: &[(u32, Vec3)],
    params: &UwbParams,
    init: &InitParams,
) -> Result<Refined> {
    if guesses.iter().any(|(_, p)| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InitFailed("non-finite initial guess".into()));
    }
    let ids: Vec<u32> = guesses.iter().map(|g| g.0).collect();
    let mut x = DVector::from_iterator(3 * ids.len(), guesses.iter().flat_map(|(_, p)| p.iter().copied()));
    let (mut cost, mut jtj, mut jtr) = joint_cost_and_jacobian(&ids, &x, rows, echoes, params);
    let mut increases = 0;
    let mut iterations = 0;
    for _ in 0..init.max_iterations {
        iterations += 1;
        let mut step = pinv_solve(&jtj, &jtr);
        if step.norm() < init.step_tolerance {
            x += &step;
            break;
        }
        let mut trial = &x + &step;
        let mut next = joint_cost_and_jacobian(&ids, &trial, rows, echoes, params);
        for _ in 0..8 {
            if next.0 <= cost {
                break;
            }
            step *= 0.5;
            trial = &x + &step;
            next = joint_cost_and_jacobian(&ids, &trial, rows, echoes, params);
        }
        if !next.0.is_finite() {
            return Err(Error::InitFailed("non-finite cost".into()));
        }
        if next.0 > cost {
            increases += 1;
            if increases >= 3 {
                return Err(Error::InitFailed(format!("cost increased {increases} times in a row")));
            }
        } else {
            increases = 0;
        }
        x = trial;
        (cost, jtj, jtr) = next;
        if step.norm() < init.step_tolerance {
            break;
        }
    }
    let (cost, information, _) = joint_cost_and_jacobian(&ids, &x, rows, echoes, params);
    let anchors = ids.iter().enumerate().map(|(k, id)| (*id, Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))).collect();
    Ok(Refined { anchors, cost, iterations, information })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorInitResult {
    pub anchors: Vec<(u32, Vec3)>,
    /// Joint `3A × 3A` covariance.
    pub paa: DMatrix<f64>,
    /// `dim × 3A` cross-covariance with the error state before augmentation.
    pub pxa: DMatrix<f64>,
}

/// Anchor covariance from ranges linearized against the window clones.
///
/// For each anchor the stacked range rows `r ≈ H_x x̃ + H_a p̃_a + n` are
/// triangularized on `H_a`; the top three rows give
/// `p̃_a = -H_a1⁻¹ (H_x1 x̃ + n₁)`.
pub fn init_covariance(
    state: &FilterState,
    keyframes: &[KeyframeRanges],
    anchors: &[(u32, Vec3)],
    params: &UwbParams,
) -> Result<AnchorInitResult> {
    let dim = state.dim();
    let na = anchors.len();
    let mut ha1_inv = DMatrix::zeros(3 * na, 3 * na);
    let mut hx1 = DMatrix::zeros(3 * na, dim);
    let lever = skew(&params.lever_arm);
    for (k, (id, pa)) in anchors.iter().enumerate() {
        let used: Vec<(&KeyframeRanges, f64)> = keyframes
            .iter()
            .flat_map(|kf| kf.ranges.iter().filter(|r| r.anchor == *id).map(move |r| (kf, r.d)))
            .collect();
        if used.len() <= 3 {
            return Err(Error::InitFailed(format!("anchor {id} has {} ranges", used.len())));
        }
        let m = used.len();
        let mut ha = DMatrix::zeros(m, 3);
        let mut hx = DMatrix::zeros(m, dim);
        for (i, (kf, _)) in used.iter().enumerate() {
            let pr = ranging_node(&kf.pose, params);
            let diff = pr - pa;
            let u = diff / diff.norm().max(1e-12);
            ha.view_mut((i, 0), (1, 3)).copy_from(&(-u.transpose()));
            if let Some((off, _)) = state.block(BlockId::Clone(kf.clone_id)) {
                let dth = -kf.pose.rot().transpose() * lever;
                hx.view_mut((i, off), (1, 3)).copy_from(&(u.transpose() * dth));
                hx.view_mut((i, off + 3), (1, 3)).copy_from(&u.transpose());
            }
        }
        givens_triangularize(&mut ha, &mut [&mut hx]);
        let h1: Matrix3<f64> = ha.fixed_view::<3, 3>(0, 0).into_owned();
        let cond = {
            let s = h1.singular_values();
            s.max() / s.min().max(f64::MIN_POSITIVE)
        };
        if !(cond < 1e10) {
            return Err(Error::InitFailed(format!("anchor {id}: triangular factor condition {cond:.1e}")));
        }
        let inv = h1.try_inverse().ok_or_else(|| Error::InitFailed(format!("anchor {id}: singular factor")))?;
        ha1_inv.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&inv);
        hx1.view_mut((3 * k, 0), (3, dim)).copy_from(&hx.rows(0, 3));
    }
    let sigma2 = params.sigma_r * params.sigma_r;
    let inner = &hx1 * &state.cov * hx1.transpose() + DMatrix::identity(3 * na, 3 * na) * sigma2;
    let mut paa = &ha1_inv * inner * ha1_inv.transpose();
    paa = (&paa + paa.transpose()) * 0.5;
    let pxa = -(&state.cov * hx1.transpose() * ha1_inv.transpose());
    Ok(AnchorInitResult { anchors: anchors.to_vec(), paa, pxa })
}

/// Covariance from the solver alone, ignoring pose uncertainty and correlation.
pub fn standalone_covariance(refined: &Refined, dim: usize) -> Result<AnchorInitResult> {
    let info = &refined.information;
    let cov = info.clone().try_inverse().ok_or_else(|| Error::InitFailed("singular information".into()))?;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(AnchorInitResult { anchors: refined.anchors.clone(), pxa: DMatrix::zeros(dim, cov.nrows()), paa: cov })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub stamp: f64,
    pub keyframes: usize,
    pub anchors: Vec<(u32, Vec3)>,
    pub paa_diagonal: Vec<f64>,
    pub iterations: usize,
    pub cost: f64,
}

/// How anchor covariance is formed at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceModel {
    /// Linearized against the window clones, with cross-covariance.
    Joint,
    /// Solver covariance only, no correlation with the state.
    Standalone,
}

/// Solve and augment when enough keyframes are buffered; `Ok(None)` means
/// not ready yet (including an ill-conditioned bootstrap).
pub fn try_initialize(
    state: &mut FilterState,
    buffer: &InitBuffer,
    uwb: &UwbParams,
    init: &InitParams,
    model: CovarianceModel,
) -> Result<Option<InitReport>> {
    if !state.anchors.is_empty() {
        return Ok(None);
    }
    let keyframes = buffer.resolve(state, model == CovarianceModel::Joint);
    let n_keyframes = match model {
        CovarianceModel::Joint => state.long_window.len(),
        CovarianceModel::Standalone => keyframes.len(),
    };
    if n_keyframes < init.n_min {
        return Ok(None);
    }
    let ids = anchor_ids(&keyframes);
    if ids.is_empty() {
        return Ok(None);
    }
    let mut rows = BTreeMap::new();
    let mut guesses = Vec::new();
    for id in &ids {
        let r = anchor_rows(&keyframes, *id, uwb);
        match linear_bootstrap(&r, uwb.bias, init.cond_max) {
            Ok(b) => guesses.push((*id, b.anchor)),
            Err(Error::IllConditioned(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
        rows.insert(*id, r);
    }
    let refined = refine_joint(&rows, &buffer.echoes, &guesses, uwb, init)?;
    let result = match model {
        CovarianceModel::Joint => init_covariance(state, &keyframes, &refined.anchors, uwb)?,
        CovarianceModel::Standalone => standalone_covariance(&refined, state.dim())?,
    };
    state.augment_anchors(&result.anchors, &result.paa, &result.pxa)?;
    state.marginalize_long_window()?;
    Ok(Some(InitReport {
        stamp: state.stamp,
        keyframes: keyframes.len(),
        anchors: result.anchors.clone(),
        paa_diagonal: result.paa.diagonal().iter().copied().collect(),
        iterations: refined.iterations,
        cost: refined.cost,
    }))
}

//! UWB ranging: robot-to-anchor and anchor-to-anchor (echo) distances.
//!
//! Updates use the squared, bias-removed distance
//! `d₂ = (d - bias)² = ‖p_r - p_a‖²`, where `p_r = p_I + Rᵀ ℓ` is the
//! ranging node and `ℓ` its lever arm in the IMU frame.

use nalgebra::{DVector, RowVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathx::{skew, Vec3};
use crate::state::{BlockId, FilterState, Measurement, Pose, POS, THETA};
use crate::vision::chi2_95;

pub type Row3 = RowVector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub stamp: f64,
    pub anchor: u32,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoMeasurement {
    pub stamp: f64,
    pub anchor_i: u32,
    pub anchor_j: u32,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UwbParams {
    /// Ranging node in the IMU frame.
    pub lever_arm: Vec3,
    pub bias: f64,
    pub sigma_r: f64,
    pub sigma_e: f64,
    pub sync_threshold: f64,
}

impl Default for UwbParams {
    fn default() -> Self {
        UwbParams { lever_arm: Vec3::new(-0.05, 0.1, 0.12), bias: -0.75, sigma_r: 0.15, sigma_e: 0.15, sync_threshold: 0.05 }
    }
}

pub fn ranging_node(pose: &Pose, params: &UwbParams) -> Vec3 {
    pose.p + pose.rot().transpose() * params.lever_arm
}

pub fn predict_range(pose: &Pose, anchor: &Vec3, params: &UwbParams) -> f64 {
    (ranging_node(pose, params) - anchor).norm() + params.bias
}

pub fn predict_echo(a_i: &Vec3, a_j: &Vec3, params: &UwbParams) -> f64 {
    (a_i - a_j).norm() + params.bias
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeJacobians {
    pub theta: Row3,
    pub pos: Row3,
    pub anchor: Row3,
}

/// Jacobians of `‖p_r - p_a‖²`; `None` when the anchor sits on the ranging node.
pub fn squared_range_jacobians(pose: &Pose, anchor: &Vec3, params: &UwbParams) -> Option<RangeJacobians> {
    let pr = ranging_node(pose, params);
    let diff = pr - anchor;
    if diff.norm() < 1e-9 {
        return None;
    }
    // ∂p_r/∂θ̃ = -R̂ᵀ⌊ℓ×⌋ under R = exp(-θ̃) R̂.
    let dpr_dth = -pose.rot().transpose() * skew(&params.lever_arm);
    let g = 2.0 * diff.transpose();
    Some(RangeJacobians { theta: g * dpr_dth, pos: g, anchor: -g })
}

/// Rows of `‖a_i - a_j‖²` over `(a_i, a_j)`.
pub fn echo_jacobians(a_i: &Vec3, a_j: &Vec3) -> Option<(Row3, Row3)> {
    let diff = a_i - a_j;
    if diff.norm() < 1e-9 {
        return None;
    }
    let g = 2.0 * diff.transpose();
    Some((g, -g))
}

/// Linear interpolation of two ranges from the same anchor to `t_k`;
/// `None` when either neighbour is farther than the sync threshold.
pub fn interpolate_range(a: &RangeMeasurement, b: &RangeMeasurement, t_k: f64, params: &UwbParams) -> Result<Option<f64>> {
    if a.anchor != b.anchor {
        return Err(Error::MixedAnchors(a.anchor, b.anchor));
    }
    if !(a.stamp < b.stamp) {
        return Err(Error::InvalidInterval(a.stamp, b.stamp));
    }
    if t_k < a.stamp || t_k > b.stamp {
        return Ok(None);
    }
    if t_k - a.stamp > params.sync_threshold || b.stamp - t_k > params.sync_threshold {
        return Ok(None);
    }
    let u = (t_k - a.stamp) / (b.stamp - a.stamp);
    Ok(Some(a.d + (b.d - a.d) * u))
}

/// Ranges of every anchor synchronized to `t_k`. `ranges` must be sorted by stamp.
pub fn synchronize(ranges: &[RangeMeasurement], t_k: f64, params: &UwbParams) -> Result<Vec<RangeMeasurement>> {
    let mut anchors: Vec<u32> = ranges.iter().map(|r| r.anchor).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let mut out = Vec::new();
    for id in anchors {
        let before = ranges.iter().rev().find(|r| r.anchor == id && r.stamp <= t_k);
        let after = ranges.iter().find(|r| r.anchor == id && r.stamp > t_k);
        let d = match (before, after) {
            (Some(a), _) if a.stamp == t_k => Some(a.d),
            (Some(a), Some(b)) => interpolate_range(a, b, t_k, params)?,
            _ => None,
        };
        if let Some(d) = d {
            out.push(RangeMeasurement { stamp: t_k, anchor: id, d });
        }
    }
    Ok(out)
}

/// Echo closest to `t_k` for every anchor pair, within the sync threshold.
pub fn nearest_echoes(echoes: &[EchoMeasurement], t_k: f64, params: &UwbParams) -> Vec<EchoMeasurement> {
    let mut best: Vec<EchoMeasurement> = Vec::new();
    for e in echoes.iter().filter(|e| (e.stamp - t_k).abs() <= params.sync_threshold) {
        let key = (e.anchor_i.min(e.anchor_j), e.anchor_i.max(e.anchor_j));
        match best.iter_mut().find(|b| (b.anchor_i.min(b.anchor_j), b.anchor_i.max(b.anchor_j)) == key) {
            Some(b) if (e.stamp - t_k).abs() < (b.stamp - t_k).abs() => *b = *e,
            Some(_) => {}
            None => best.push(*e),
        }
    }
    best.sort_by_key(|e| (e.anchor_i.min(e.anchor_j), e.anchor_i.max(e.anchor_j)));
    best
}

/// Scalar squared-range rows for the current state.
pub fn ranging_rows(
    state: &FilterState,
    ranges: &[RangeMeasurement],
    echoes: &[EchoMeasurement],
    params: &UwbParams,
    fej: bool,
) -> Result<Vec<Measurement>> {
    if state.anchors.is_empty() {
        return Err(Error::NoAnchors);
    }
    let lin_pose = state.imu_linearization(fej);
    let pose = state.imu.pose();
    let mut out = Vec::new();
    for m in ranges {
        let Some((off, _)) = state.block(BlockId::Anchor(m.anchor)) else { continue };
        let a_hat = state.anchor(m.anchor).expect("anchor present").p;
        let a_lin = state.anchor_linearization(m.anchor, fej).expect("anchor present");
        let Some(j) = squared_range_jacobians(&lin_pose, &a_lin, params) else { continue };
        let pred = (ranging_node(&pose, params) - a_hat).norm();
        let unbiased = m.d - params.bias;
        let mut cols: Vec<usize> = (THETA..THETA + 3).collect();
        cols.extend(POS..POS + 3);
        cols.extend(off..off + 3);
        let mut h = nalgebra::DMatrix::zeros(1, 9);
        h.view_mut((0, 0), (1, 3)).copy_from(&j.theta);
        h.view_mut((0, 3), (1, 3)).copy_from(&j.pos);
        h.view_mut((0, 6), (1, 3)).copy_from(&j.anchor);
        let sd = 2.0 * pred * params.sigma_r;
        out.push(Measurement {
            cols,
            h,
            residual: DVector::from_element(1, unbiased * unbiased - pred * pred),
            noise_var: DVector::from_element(1, sd * sd),
        });
    }
    for e in echoes {
        if e.anchor_i == e.anchor_j {
            return Err(Error::SameAnchor(e.anchor_i));
        }
        let (Some((oi, _)), Some((oj, _))) = (state.block(BlockId::Anchor(e.anchor_i)), state.block(BlockId::Anchor(e.anchor_j))) else {
            continue;
        };
        let ai = state.anchor(e.anchor_i).expect("anchor present").p;
        let aj = state.anchor(e.anchor_j).expect("anchor present").p;
        let li = state.anchor_linearization(e.anchor_i, fej).expect("anchor present");
        let lj = state.anchor_linearization(e.anchor_j, fej).expect("anchor present");
        let Some((gi, gj)) = echo_jacobians(&li, &lj) else { continue };
        let pred = (ai - aj).norm();
        let unbiased = e.d - params.bias;
        let mut cols: Vec<usize> = (oi..oi + 3).collect();
        cols.extend(oj..oj + 3);
        let mut h = nalgebra::DMatrix::zeros(1, 6);
        h.view_mut((0, 0), (1, 3)).copy_from(&gi);
        h.view_mut((0, 3), (1, 3)).copy_from(&gj);
        let sd = 2.0 * pred * params.sigma_e;
        out.push(Measurement {
            cols,
            h,
            residual: DVector::from_element(1, unbiased * unbiased - pred * pred),
            noise_var: DVector::from_element(1, sd * sd),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangingStats {
    pub used: usize,
    pub gated: usize,
}

/// Gate each scalar row and apply one stacked EKF update.
pub fn ranging_update(
    state: &mut FilterState,
    ranges: &[RangeMeasurement],
    echoes: &[EchoMeasurement],
    params: &UwbParams,
    fej: bool,
) -> Result<RangingStats> {
    let rows = ranging_rows(state, ranges, echoes, params, fej)?;
    let gate = chi2_95(1);
    let mut stats = RangingStats::default();
    let mut keep = Vec::new();
    for m in rows {
        if state.innovation_chi2(&m)? > gate {
            stats.gated += 1;
        } else {
            stats.used += 1;
            keep.push(m);
        }
    }
    if let Some(m) = crate::vision::stack(&keep) {
        state.ekf_update(&m)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathx::so3_exp;
    use crate::state::{ImuState, Window};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn no_lever(bias: f64) -> UwbParams {
        UwbParams { lever_arm: Vec3::zeros(), bias, ..UwbParams::default() }
    }

    #[test]
    fn three_four_five() {
        let d = predict_range(&Pose::identity(), &Vec3::new(3.0, 4.0, 0.0), &no_lever(0.5));
        assert_eq!(d, 5.5);
        let p = UwbParams { bias: -0.3, ..UwbParams::default() };
        let pose = Pose::new(&so3_exp(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        assert_relative_eq!(predict_range(&pose, &ranging_node(&pose, &p), &p), -0.3);
    }

    #[test]
    fn lever_arm_against_frame_composition() {
        // Oracle: ranging node as the image of ℓ under the IMU-to-global transform.
        let p = UwbParams::default();
        let axis_angle = Vec3::new(0.4, -0.7, 1.1);
        let pose = Pose::new(&so3_exp(&axis_angle), Vec3::new(0.5, -1.0, 2.0));
        let r_gi = nalgebra::Rotation3::from_scaled_axis(-axis_angle);
        let node = pose.p + r_gi * p.lever_arm;
        let anchor = Vec3::new(4.0, 3.0, -1.0);
        assert_relative_eq!(predict_range(&pose, &anchor, &p), (node - anchor).norm() + p.bias, epsilon = 1e-12);
    }

    #[test]
    fn echo_values() {
        let p = no_lever(0.0);
        let (a, b) = (Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(predict_echo(&a, &b, &p), 2.0);
        assert_eq!(predict_echo(&a, &b, &p), predict_echo(&b, &a, &p));
        assert_eq!(predict_echo(&a, &b, &no_lever(-0.75)), 2.0 - 0.75);
        let (gi, gj) = echo_jacobians(&a, &b).unwrap();
        assert_eq!(gi + gj, Row3::zeros());
        assert_eq!((gi[0], gi[1]), (0.0, 0.0));
        assert!(echo_jacobians(&a, &a).is_none());
    }

    #[test]
    fn zero_lever_arm_has_no_orientation_row() {
        let pose = Pose::new(&so3_exp(&Vec3::new(0.3, 0.0, 0.2)), Vec3::new(1.0, 0.0, 0.0));
        let j = squared_range_jacobians(&pose, &Vec3::new(3.0, 2.0, 1.0), &no_lever(0.0)).unwrap();
        assert_eq!(j.theta, Row3::zeros());
        assert_eq!(j.pos, -j.anchor);
    }

    fn rel(a: &Row3, b: &Row3) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    proptest! {
        #[test]
        fn squared_range_rows_match_finite_differences(
            th in proptest::array::uniform3(-2.0..2.0f64),
            p in proptest::array::uniform3(-5.0..5.0f64),
            a in proptest::array::uniform3(-8.0..8.0f64),
        ) {
            let params = UwbParams::default();
            let pose = Pose::new(&so3_exp(&Vec3::from(th)), Vec3::from(p));
            let anchor = Vec3::from(a);
            prop_assume!((ranging_node(&pose, &params) - anchor).norm() > 0.5);
            let j = squared_range_jacobians(&pose, &anchor, &params).unwrap();
            let d2 = |pose: &Pose, a: &Vec3| (predict_range(pose, a, &params) - params.bias).powi(2);
            let h = 1e-5;
            let mut jt = Row3::zeros();
            let mut jp = Row3::zeros();
            let mut ja = Row3::zeros();
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let plus = d2(&crate::state::pose_boxplus(&pose, &d), &anchor);
                d[k] = -h;
                let minus = d2(&crate::state::pose_boxplus(&pose, &d), &anchor);
                let v = (plus - minus) / (2.0 * h);
                if k < 3 { jt[k] = v } else { jp[k - 3] = v }
            }
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                ja[k] = (d2(&pose, &(anchor + e)) - d2(&pose, &(anchor - e))) / (2.0 * h);
            }
            prop_assert!(rel(&j.theta, &jt) < 1e-5 || (j.theta - jt).norm() < 1e-8);
            prop_assert!(rel(&j.pos, &jp) < 1e-5);
            prop_assert!(rel(&j.anchor, &ja) < 1e-5);
        }

        #[test]
        fn echo_rows_match_finite_differences(
            a in proptest::array::uniform3(-8.0..8.0f64),
            b in proptest::array::uniform3(-8.0..8.0f64),
        ) {
            let (ai, aj) = (Vec3::from(a), Vec3::from(b));
            prop_assume!((ai - aj).norm() > 0.1);
            let (gi, gj) = echo_jacobians(&ai, &aj).unwrap();
            let h = 1e-5;
            let mut fi = Row3::zeros();
            let mut fj = Row3::zeros();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                fi[k] = ((ai + e - aj).norm_squared() - (ai - e - aj).norm_squared()) / (2.0 * h);
                fj[k] = ((ai - aj - e).norm_squared() - (ai - aj + e).norm_squared()) / (2.0 * h);
            }
            prop_assert!(rel(&gi, &fi) < 1e-5);
            prop_assert!(rel(&gj, &fj) < 1e-5);
        }
    }

    #[test]
    fn interpolation_rules() {
        let p = UwbParams::default();
        let a = RangeMeasurement { stamp: 1.0, anchor: 0, d: 4.0 };
        let b = RangeMeasurement { stamp: 1.02, anchor: 0, d: 5.0 };
        assert_eq!(interpolate_range(&a, &b, 1.0, &p).unwrap(), Some(4.0));
        assert_relative_eq!(interpolate_range(&a, &b, 1.01, &p).unwrap().unwrap(), 4.5, epsilon = 1e-12);
        let far = RangeMeasurement { stamp: 1.0 + 2.0 * p.sync_threshold + 1e-6, ..b };
        assert_eq!(interpolate_range(&a, &far, 1.0 + p.sync_threshold - 1e-7, &p).unwrap(), None);
        let other = RangeMeasurement { anchor: 1, ..b };
        assert!(matches!(interpolate_range(&a, &other, 1.01, &p), Err(Error::MixedAnchors(0, 1))));
        assert!(matches!(interpolate_range(&b, &a, 1.01, &p), Err(Error::InvalidInterval(..))));
    }

    #[test]
    fn squared_noise_matches_monte_carlo() {
        // First-order variance (2 d σ)² against sampled (d + n)² for d = 6 m.
        let (d, sigma) = (6.0f64, 0.15f64);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| (d + normal.sample(&mut rng)).powi(2)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let linear = (2.0 * d * sigma).powi(2);
        assert!((var / linear - 1.0).abs() < 0.02, "ratio {}", var / linear);
    }

    fn anchored_state() -> FilterState {
        let imu = ImuState::at_rest(Pose::new(&so3_exp(&Vec3::new(0.0, 0.0, 0.4)), Vec3::new(0.5, 0.5, 1.0)));
        let mut s = FilterState::new(0.0, imu, DMatrix::identity(15, 15) * 1e-2, Vec3::new(0.0, 0.0, 9.81)).unwrap();
        s.clone_current_pose(0.1, Window::Short).unwrap();
        let anchors = [(0, Vec3::new(4.0, 0.0, 2.0)), (1, Vec3::new(0.0, 5.0, 0.5)), (2, Vec3::new(-3.0, -3.0, 3.0))];
        let n = s.dim();
        s.augment_anchors(&anchors, &(DMatrix::identity(9, 9) * 0.09), &DMatrix::zeros(n, 9)).unwrap();
        s
    }

    fn exact(s: &FilterState, p: &UwbParams) -> (Vec<RangeMeasurement>, Vec<EchoMeasurement>) {
        let r = s.anchors.iter().map(|a| RangeMeasurement { stamp: 0.1, anchor: a.id, d: predict_range(&s.imu.pose(), &a.p, p) }).collect();
        let e = vec![EchoMeasurement { stamp: 0.1, anchor_i: 0, anchor_j: 2, d: predict_echo(&s.anchors[0].p, &s.anchors[2].p, p) }];
        (r, e)
    }

    #[test]
    fn zero_residual_gives_zero_correction() {
        let p = UwbParams::default();
        let mut s = anchored_state();
        let before = s.imu.clone();
        let (r, e) = exact(&s, &p);
        let stats = ranging_update(&mut s, &r, &e, &p, false).unwrap();
        assert_eq!(stats.used, 4);
        assert_relative_eq!(s.imu.p, before.p, epsilon = 1e-12);
    }

    #[test]
    fn no_anchor_is_error() {
        let imu = ImuState::at_rest(Pose::identity());
        let mut s = FilterState::new(0.0, imu, DMatrix::identity(15, 15), Vec3::zeros()).unwrap();
        assert!(matches!(ranging_update(&mut s, &[], &[], &UwbParams::default(), false), Err(Error::NoAnchors)));
    }

    #[test]
    fn anchor_trace_nonincreasing_on_static_pose() {
        let p = UwbParams::default();
        let mut s = anchored_state();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, p.sigma_r).unwrap();
        let truth = s.clone();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (mut r, mut e) = exact(&truth, &p);
            r.iter_mut().for_each(|m| m.d += noise.sample(&mut rng));
            e.iter_mut().for_each(|m| m.d += noise.sample(&mut rng));
            ranging_update(&mut s, &r, &e, &p, true).unwrap();
            let o = s.anchor_offset(0);
            let tr = s.cov.view((o, o), (9, 9)).trace();
            assert!(tr <= last + 1e-12);
            last = tr;
        }
    }

    #[test]
    fn fej_rows_are_frozen() {
        let p = UwbParams::default();
        let mut s = anchored_state();
        let (mut r, e) = exact(&s, &p);
        r[0].d += 0.3;
        let before = ranging_rows(&s, &r, &e, &p, true).unwrap();
        ranging_update(&mut s, &r, &e, &p, true).unwrap();
        let after = ranging_rows(&s, &r, &e, &p, true).unwrap();
        assert!(s.imu.p != anchored_state().imu.p);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.h.as_slice(), b.h.as_slice());
        }
    }

    #[test]
    fn correction_invariant_under_state_permutation() {
        // Oracle: dense Kalman gain on a permuted error state.
        let p = UwbParams::default();
        let s = anchored_state();
        let (mut r, e) = exact(&s, &p);
        r[1].d += 0.2;
        let rows = ranging_rows(&s, &r, &e, &p, false).unwrap();
        let m = crate::vision::stack(&rows).unwrap();
        let n = s.dim();
        let mut dense = DMatrix::zeros(m.rows(), n);
        for (j, c) in m.cols.iter().enumerate() {
            dense.set_column(*c, &m.h.column(j));
        }
        let perm: Vec<usize> = (0..n).rev().collect();
        let pi = DMatrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let pp = &pi * &s.cov * pi.transpose();
        let hp = &dense * pi.transpose();
        let sm = &hp * &pp * hp.transpose() + DMatrix::from_diagonal(&m.noise_var);
        let k = &pp * hp.transpose() * sm.try_inverse().unwrap();
        let delta_perm = k * &m.residual;

        let mut s2 = s.clone();
        let delta = s2.ekf_update(&m).unwrap();
        assert!((pi * delta - delta_perm).amax() < 1e-10);
    }

    #[test]
    fn gating_rate_with_true_states() {
        let p = UwbParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, p.sigma_r).unwrap();
        let mut s = anchored_state();
        s.cov *= 1e-12;
        let gate = chi2_95(1);
        let (mut rejected, mut total) = (0, 0);
        for _ in 0..3334 {
            s.imu.p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..2.0));
            s.imu.q = crate::mathx::Quat::from_rot(&so3_exp(&Vec3::new(0.0, 0.0, rng.random_range(-3.0..3.0))));
            let (mut r, _) = exact(&s, &p);
            for m in r.iter_mut() {
                m.d += noise.sample(&mut rng);
            }
            for row in ranging_rows(&s, &r, &[], &p, false).unwrap() {
                total += 1;
                if s.innovation_chi2(&row).unwrap() > gate {
                    rejected += 1;
                }
            }
        }
        let rate = rejected as f64 / total as f64;
        assert!(total >= 10_000 && rate < 0.055, "rate {rate}");
    }
}

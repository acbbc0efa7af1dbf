use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::mathx::{quat_to_rot, Quat, Vec3};
use crate::propagation::propagate;
use crate::ranging::{nearest_echoes, ranging_update, synchronize};
use crate::sim::{gravity, SimData};
use crate::state::{BlockId, FilterState, ImuState, StateSnapshot, Window, BA, BG, POS, THETA, VEL};
use crate::uwb_init::{try_initialize, InitBuffer, InitReport, KeyframeRanges};
use crate::vision::{msckf_update, Track, Vec2};

use super::config::{Mode, RunConfig};

/// Filter output at one camera stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub snapshot: StateSnapshot,
    /// Orientation error covariance in the IMU frame.
    pub p_theta: Matrix3<f64>,
    pub p_pos: Matrix3<f64>,
    pub initialized: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub tracks_used: usize,
    pub tracks_rejected: usize,
    pub tracks_gated: usize,
    pub ranges_used: usize,
    pub ranges_gated: usize,
    pub init_attempt_errors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub mode: Mode,
    pub epochs: Vec<Epoch>,
    pub init: Option<InitReport>,
    pub anchor_ids: Vec<u32>,
    pub stats: RunStats,
    pub warnings: Vec<String>,
}

impl RunOutput {
    pub fn init_stamp(&self) -> Option<f64> {
        self.init.as_ref().map(|r| r.stamp)
    }
}

fn initial_state(cfg: &RunConfig, data: &SimData) -> Result<FilterState> {
    let s = &cfg.filter.initial_sigma;
    let gt = data
        .groundtruth
        .first()
        .ok_or_else(|| crate::error::Error::Config("ground truth stream is empty".into()))?;
    let r = quat_to_rot(&gt.q)?;
    let truth = ImuState { q: gt.q, bg: Vec3::zeros(), v: gt.v, ba: Vec3::zeros(), p: gt.p };

    // Orientation uncertainty is specified in the global frame: θ̃ = R φ.
    let p_phi = Matrix3::from_diagonal(&Vec3::new(s.roll_pitch.powi(2), s.roll_pitch.powi(2), s.yaw.powi(2)));
    let p_theta = r * p_phi * r.transpose();
    let mut p0 = DMatrix::zeros(15, 15);
    p0.view_mut((THETA, THETA), (3, 3)).copy_from(&p_theta);
    for (off, sd) in [(BG, s.gyro_bias), (VEL, s.velocity), (BA, s.accel_bias), (POS, s.position)] {
        for i in 0..3 {
            p0[(off + i, off + i)] = sd * sd;
        }
    }

    let mut imu = truth.clone();
    if cfg.filter.perturb_initial {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
        rng.set_stream(101);
        let mut n = |sd: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sd
        };
        let phi = Vec3::new(n(s.roll_pitch), n(s.roll_pitch), n(s.yaw));
        let mut delta = [0.0; 15];
        let theta = r * phi;
        for i in 0..3 {
            delta[THETA + i] = theta[i];
            delta[BG + i] = n(s.gyro_bias);
            delta[VEL + i] = n(s.velocity);
            delta[BA + i] = n(s.accel_bias);
            delta[POS + i] = n(s.position);
        }
        // The estimate is truth ⊟ error: truth = estimate ⊞ delta.
        let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
        imu = truth.boxplus(&neg);
    }
    let mut state = FilterState::new(gt.stamp, imu, p0, gravity())?;
    state.max_short = cfg.filter.max_clones;
    state.max_long = cfg.filter.max_keyframes;
    Ok(state)
}

fn take_tracks(tracks: &mut BTreeMap<u64, Vec<(u64, Vec2)>>, pred: impl Fn(&[(u64, Vec2)]) -> bool) -> Vec<Track> {
    let ids: Vec<u64> = tracks.iter().filter(|(_, obs)| pred(obs)).map(|(id, _)| *id).collect();
    ids.into_iter().map(|id| Track { id, obs: tracks.remove(&id).unwrap() }).collect()
}

/// Run the estimator over recorded streams.
pub fn run_pipeline(cfg: &RunConfig, data: &SimData) -> Result<RunOutput> {
    let mode = cfg.mode;
    let uwb = cfg.sim.uwb;
    let cam = cfg.sim.camera;
    let mut state = initial_state(cfg, data)?;
    let mut tracks: BTreeMap<u64, Vec<(u64, Vec2)>> = BTreeMap::new();
    let mut buffer = InitBuffer::default();
    let mut last_keyframe: Option<Vec3> = None;
    let mut init: Option<InitReport> = None;
    let mut stats = RunStats::default();
    let mut warnings = Vec::new();
    let mut epochs = Vec::with_capacity(data.frames.len());
    let mut anchor_ids: Vec<u32> = data.ranges.iter().map(|r| r.anchor).collect();
    anchor_ids.sort_unstable();
    anchor_ids.dedup();
    if !mode.uses_uwb() {
        anchor_ids.clear();
    }
    let mut uwb_enabled = mode.uses_uwb();
    let mut range_cursor = 0;
    let mut echo_cursor = 0;

    for frame in &data.frames {
        let t = frame.stamp;
        if t < state.stamp {
            continue;
        }
        if t > state.stamp {
            let lo = data.imu.partition_point(|s| s.stamp < state.stamp).saturating_sub(2);
            let hi = (data.imu.partition_point(|s| s.stamp <= t) + 2).min(data.imu.len());
            propagate(&mut state, &data.imu[lo..hi], t, &cfg.filter.imu_noise, true)?;
        }

        if state.short_window.len() >= state.max_short {
            let oldest = state.short_window[0].id;
            let due = take_tracks(&mut tracks, |obs| obs.iter().any(|(c, _)| *c == oldest));
            let vs = msckf_update(&mut state, &cam, &due, true)?;
            stats.tracks_used += vs.used;
            stats.tracks_rejected += vs.rejected;
            stats.tracks_gated += vs.gated;
        }
        let clone_id = state.clone_current_pose(t, Window::Short)?;
        for (fid, z) in &frame.observations {
            tracks.entry(*fid).or_default().push((clone_id, *z));
        }
        let lost = take_tracks(&mut tracks, |obs| obs.last().map(|o| o.0) != Some(clone_id));
        let vs = msckf_update(&mut state, &cam, &lost, true)?;
        stats.tracks_used += vs.used;
        stats.tracks_rejected += vs.rejected;
        stats.tracks_gated += vs.gated;

        if uwb_enabled {
            // Only measurements near this stamp matter; advance cursors past stale ones.
            while range_cursor < data.ranges.len() && data.ranges[range_cursor].stamp < t - 2.0 * uwb.sync_threshold {
                range_cursor += 1;
            }
            while echo_cursor < data.echoes.len() && data.echoes[echo_cursor].stamp < t - 2.0 * uwb.sync_threshold {
                echo_cursor += 1;
            }
            let r_end = data.ranges[range_cursor..].partition_point(|r| r.stamp <= t + 2.0 * uwb.sync_threshold) + range_cursor;
            let e_end = data.echoes[echo_cursor..].partition_point(|e| e.stamp <= t + 2.0 * uwb.sync_threshold) + echo_cursor;
            let ranges = synchronize(&data.ranges[range_cursor..r_end], t, &uwb)?;
            let echoes = nearest_echoes(&data.echoes[echo_cursor..e_end], t, &uwb);

            if init.is_none() {
                let p = state.imu.p;
                let is_keyframe = last_keyframe.is_none_or(|k| (p - k).norm() >= cfg.filter.init.keyframe_spacing);
                if is_keyframe {
                    last_keyframe = Some(p);
                }
                let id = if is_keyframe && mode.covariance_model() == crate::uwb_init::CovarianceModel::Joint {
                    state.clone_current_pose(t, Window::Long)?
                } else {
                    clone_id
                };
                if is_keyframe || mode.covariance_model() == crate::uwb_init::CovarianceModel::Joint {
                    buffer.push(KeyframeRanges { clone_id: id, pose: state.imu.pose(), ranges: ranges.clone() });
                }
                buffer.echoes.extend(echoes.iter().copied());
                // Drop buffered short-window entries whose clone is gone and keyframes that fell out.
                if mode.covariance_model() == crate::uwb_init::CovarianceModel::Joint {
                    buffer.keyframes.retain(|k| state.block(BlockId::Clone(k.clone_id)).is_some());
                } else if buffer.keyframes.len() > cfg.filter.max_keyframes {
                    let excess = buffer.keyframes.len() - cfg.filter.max_keyframes;
                    buffer.keyframes.drain(..excess);
                }
                match try_initialize(&mut state, &buffer, &uwb, &cfg.filter.init, mode.covariance_model()) {
                    Ok(Some(report)) => {
                        init = Some(report);
                        buffer = InitBuffer::default();
                    }
                    Ok(None) => {}
                    Err(crate::error::Error::InitFailed(msg)) => {
                        stats.init_attempt_errors += 1;
                        if stats.init_attempt_errors == 1 {
                            warnings.push(format!("anchor initialization failed at {t:.3}: {msg}"));
                        }
                    }
                    Err(e) => {
                        warnings.push(format!("anchor initialization aborted at {t:.3}: {e}; continuing without UWB"));
                        uwb_enabled = false;
                        state.marginalize_long_window()?;
                    }
                }
            } else if !ranges.is_empty() || !echoes.is_empty() {
                let rs = ranging_update(&mut state, &ranges, &echoes, &uwb, mode.fej_ranging())?;
                stats.ranges_used += rs.used;
                stats.ranges_gated += rs.gated;
            }
        }

        epochs.push(Epoch {
            snapshot: state.snapshot(),
            p_theta: state.cov.fixed_view::<3, 3>(THETA, THETA).into_owned(),
            p_pos: state.cov.fixed_view::<3, 3>(POS, POS).into_owned(),
            initialized: init.is_some(),
        });
    }
    Ok(RunOutput { mode, epochs, init, anchor_ids, stats, warnings })
}

/// Global-frame orientation covariance `R̂ᵀ P_θθ R̂`.
pub fn global_orientation_cov(q: &Quat, p_theta: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let r = quat_to_rot(q)?;
    Ok(r.transpose() * p_theta * r)
}

//! CSV and text outputs. Numbers use fixed precision so identical runs give
//! byte-identical files.

use std::fmt::Write as _;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mathx::Vec3;
use crate::observability::{build_observability_matrix, Linearization, ObsConfig, ObsScene, ObservabilityReport};
use crate::sim::SimConfig;
use crate::state::StateSnapshot;
use crate::uwb_init::InitReport;

use super::eval::EvalSeries;
use super::pipeline::{Epoch, RunOutput};

const COV_COLUMNS: [&str; 12] = [
    "ptheta_xx", "ptheta_xy", "ptheta_xz", "ptheta_yy", "ptheta_yz", "ptheta_zz", "ppos_xx", "ppos_xy", "ppos_xz", "ppos_yy",
    "ppos_yz", "ppos_zz",
];
const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// State estimates plus the orientation (IMU frame) and position covariance
/// blocks, upper triangles, so NEES can be recomputed from the file alone.
pub fn trajectory_csv(run: &RunOutput) -> String {
    let mut out = StateSnapshot::csv_header(&run.anchor_ids);
    out.push_str(",initialized,");
    out.push_str(&COV_COLUMNS.join(","));
    out.push('\n');
    for e in &run.epochs {
        out.push_str(&e.snapshot.csv_row(&run.anchor_ids));
        write!(out, ",{}", e.initialized as u8).unwrap();
        for m in [&e.p_theta, &e.p_pos] {
            for (i, j) in UPPER {
                write!(out, ",{:e}", m[(i, j)]).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Epoch>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    let anchor_ids: Vec<u32> = header
        .split(',')
        .filter_map(|c| c.strip_prefix('a').and_then(|r| r.strip_suffix("_x")))
        .map(|id| id.parse::<u32>().map_err(|e| Error::Parse(format!("anchor column {id:?}: {e}"))))
        .collect::<Result<_>>()?;
    let n_state = 17 + 3 * anchor_ids.len();
    let mut epochs = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_state + 13 {
            return Err(Error::Parse(format!("expected {} fields, got {}", n_state + 13, fields.len())));
        }
        let snapshot = StateSnapshot::parse_row(&fields[..n_state].join(","), &anchor_ids)?;
        let nums: Vec<f64> = fields[n_state..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let block = |off: usize| {
            let mut m = Matrix3::zeros();
            for (k, (i, j)) in UPPER.iter().enumerate() {
                m[(*i, *j)] = nums[off + k];
                m[(*j, *i)] = nums[off + k];
            }
            m
        };
        epochs.push(Epoch { snapshot, initialized: nums[0] != 0.0, p_theta: block(1), p_pos: block(7) });
    }
    Ok(epochs)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into())
}

pub fn nees_csv(series: &EvalSeries) -> String {
    let mut out = String::from("stamp,nees_ori,nees_pos,initialized\n");
    for p in &series.points {
        writeln!(out, "{:.6},{},{},{}", p.stamp, opt(p.nees_ori), opt(p.nees_pos), p.initialized as u8).unwrap();
    }
    out
}

/// Monte-Carlo mean NEES per stamp.
pub fn mean_nees_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("stamp,nees_ori,nees_pos\n");
    for (t, o, p) in rows {
        writeln!(out, "{t:.6},{o:.6},{p:.6}").unwrap();
    }
    out
}

pub const SIGMA_HEADER: &str = "stamp,err_roll,err_pitch,err_yaw,err_px,err_py,err_pz,\
3sigma_roll,3sigma_pitch,3sigma_yaw,3sigma_px,3sigma_py,3sigma_pz";

pub fn sigma_bounds_csv(series: &EvalSeries) -> String {
    let mut out = String::from(SIGMA_HEADER);
    out.push('\n');
    for p in &series.points {
        let vals: Vec<f64> = p
            .ori_err
            .iter()
            .chain(p.pos_err.iter())
            .copied()
            .chain(p.ori_sigma.iter().chain(p.pos_sigma.iter()).map(|s| 3.0 * s))
            .collect();
        let body: Vec<String> = vals.iter().map(|v| format!("{v:.9}")).collect();
        writeln!(out, "{:.6},{}", p.stamp, body.join(",")).unwrap();
    }
    out
}

/// One sigma-bounds row: `(stamp, errors[6], three_sigma[6])`.
pub fn parse_sigma_row(line: &str) -> Result<(f64, [f64; 6], [f64; 6])> {
    let v: Vec<f64> = line
        .split(',')
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != 13 {
        return Err(Error::Parse(format!("expected 13 fields, got {}", v.len())));
    }
    let mut e = [0.0; 6];
    let mut s = [0.0; 6];
    e.copy_from_slice(&v[1..7]);
    s.copy_from_slice(&v[7..13]);
    Ok((v[0], e, s))
}

pub fn init_report_csv(report: Option<&InitReport>, truth: &[(u32, Vec3)]) -> String {
    let mut out = String::from("stamp,anchor_id,x,y,z,var_x,var_y,var_z,error,keyframes,iterations,cost\n");
    let Some(r) = report else { return out };
    for (k, (id, p)) in r.anchors.iter().enumerate() {
        let err = truth.iter().find(|t| t.0 == *id).map(|t| (t.1 - p).norm());
        let d = &r.paa_diagonal[3 * k..3 * k + 3];
        writeln!(
            out,
            "{:.6},{id},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.6e},{},{},{},{:.6}",
            r.stamp,
            p.x,
            p.y,
            p.z,
            d[0],
            d[1],
            d[2],
            opt(err),
            r.keyframes,
            r.iterations,
            r.cost
        )
        .unwrap();
    }
    out
}

/// Ideal, actual and first-estimate observability reports for one trajectory.
pub fn obs_report_rows(sim: &SimConfig, cfg: &ObsConfig) -> Result<Vec<ObservabilityReport>> {
    let scene = ObsScene::new(sim, cfg)?;
    [Linearization::Ideal, Linearization::Actual, Linearization::Fej]
        .into_iter()
        .map(|m| build_observability_matrix(&scene, m, cfg))
        .collect()
}

pub fn obs_report_csv(runs: &[(String, Vec<ObservabilityReport>)]) -> String {
    let mut out = format!("trajectory,{}\n", ObservabilityReport::csv_header());
    for (name, reports) in runs {
        for r in reports {
            writeln!(out, "{name},{}", r.csv_row()).unwrap();
        }
    }
    out
}

use rayon::prelude::*;

use crate::error::Result;
use crate::sim::{simulate, GroundTruth, SimData};

use super::config::{Mode, RunConfig};
use super::eval::{evaluate, run_ate, EvalSeries};
use super::pipeline::{run_pipeline, RunOutput};

/// One mode's outcome on one simulated dataset.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub mode: Mode,
    pub nees_ori: f64,
    pub nees_pos: f64,
    pub ate: f64,
    pub yaw_drop: Option<f64>,
    /// Largest anchor position error at initialization, m.
    pub init_error: Option<f64>,
    pub series: EvalSeries,
}

#[derive(Clone, Debug)]
pub struct McSummary {
    pub mode: Mode,
    pub runs: usize,
    pub nees_ori: f64,
    pub nees_pos: f64,
    pub ate: f64,
}

pub fn init_error(run: &RunOutput, truth: &GroundTruth) -> Option<f64> {
    let r = run.init.as_ref()?;
    r.anchors
        .iter()
        .filter_map(|(id, p)| truth.anchors.iter().find(|a| a.0 == *id).map(|a| (a.1 - p).norm()))
        .reduce(f64::max)
}

pub fn simulate_and_run(cfg: &RunConfig) -> Result<(GroundTruth, SimData, RunOutput)> {
    let (truth, data) = simulate(&cfg.sim)?;
    let out = run_pipeline(cfg, &data)?;
    Ok((truth, data, out))
}

fn score(cfg: &RunConfig, mode: Mode, truth: &GroundTruth, data: &SimData) -> Result<SeedResult> {
    let mut c = cfg.clone();
    c.mode = mode;
    let run = run_pipeline(&c, data)?;
    let series = evaluate(&run.epochs, &data.groundtruth)?;
    let (nees_ori, nees_pos) = series.mean_nees(true);
    Ok(SeedResult {
        seed: cfg.sim.seed,
        mode,
        nees_ori,
        nees_pos,
        ate: run_ate(&run.epochs, &data.groundtruth)?,
        yaw_drop: series.yaw_sigma_drop(5.0),
        init_error: init_error(&run, truth),
        series,
    })
}

/// Runs every mode on `runs` datasets seeded `base.sim.seed + k`. All modes
/// share each dataset, so comparisons between modes are paired. Results are
/// ordered by seed then by the order of `modes`, independent of threading.
pub fn monte_carlo(base: &RunConfig, modes: &[Mode], runs: usize) -> Result<Vec<SeedResult>> {
    let per_seed: Vec<Result<Vec<SeedResult>>> = (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let mut cfg = base.clone();
            cfg.sim.seed = base.sim.seed.wrapping_add(k);
            let (truth, data) = simulate(&cfg.sim)?;
            modes.iter().map(|&m| score(&cfg, m, &truth, &data)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(runs * modes.len());
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

pub fn summarize(results: &[SeedResult], mode: Mode) -> McSummary {
    let sel: Vec<&SeedResult> = results.iter().filter(|r| r.mode == mode).collect();
    let n = sel.len().max(1) as f64;
    McSummary {
        mode,
        runs: sel.len(),
        nees_ori: sel.iter().map(|r| r.nees_ori).sum::<f64>() / n,
        nees_pos: sel.iter().map(|r| r.nees_pos).sum::<f64>() / n,
        ate: sel.iter().map(|r| r.ate).sum::<f64>() / n,
    }
}

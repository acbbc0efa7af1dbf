//! Pipeline driver, evaluation and report writers.

pub mod config;
pub mod eval;
pub mod montecarlo;
pub mod pipeline;
pub mod report;

pub use config::{FilterConfig, InitialSigma, Mode, RunConfig};
pub use eval::{compute_ate, evaluate, nees, run_ate, EvalPoint, EvalSeries};
pub use montecarlo::{monte_carlo, simulate_and_run, summarize, McSummary, SeedResult};
pub use pipeline::{run_pipeline, Epoch, RunOutput, RunStats};

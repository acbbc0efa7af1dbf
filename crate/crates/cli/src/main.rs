use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viro_core::harness::eval::mean_nees_series;
use viro_core::harness::montecarlo::summarize;
use viro_core::harness::report;
use viro_core::harness::{evaluate, monte_carlo, run_ate, run_pipeline, EvalSeries, Mode, RunConfig};
use viro_core::sim::{simulate, SimConfig, SimData, TrajectorySpec};
use viro_core::{Error, Result};

#[derive(Parser)]
#[command(name = "viro", version, about = "Visual-inertial-ranging odometry: simulation, estimation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated measurement streams and ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the estimator once and write its trajectory and evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        /// Directory of measurement files from `simulate`; simulates afresh when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte-Carlo runs over consecutive seeds; all modes unless `--mode` is given.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Observability matrix residuals for ideal, actual and first-estimate linearization.
    ObsReport {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trajectory file against ground truth.
    Evaluate {
        #[arg(long)]
        trajectory: PathBuf,
        /// Directory of measurement files from `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.sim.seed = s;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_eval(dir: &Path, series: &EvalSeries, ate: f64) -> Result<()> {
    write(dir, "nees.csv", &report::nees_csv(series))?;
    write(dir, "sigma_bounds.csv", &report::sigma_bounds_csv(series))?;
    let (no, np) = series.mean_nees(true);
    write(dir, "ate.txt", &format!("ate_m {ate:.6}\nmean_nees_ori {no:.6}\nmean_nees_pos {np:.6}\n"))
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load(&common)?;
            fs::create_dir_all(&common.out)?;
            let (_, data) = simulate(&cfg.sim)?;
            data.write(&common.out, &cfg.sim.hash())?;
            Ok(format!("wrote {} imu samples, {} frames, {} ranges to {}", data.imu.len(), data.frames.len(), data.ranges.len(), common.out.display()))
        }
        Command::Run { common, mode, data } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let (truth, data) = match data {
                Some(dir) => (cfg.sim.ground_truth()?, SimData::read(&dir)?),
                None => simulate(&cfg.sim)?,
            };
            fs::create_dir_all(&common.out)?;
            let run = run_pipeline(&cfg, &data)?;
            write(&common.out, "trajectory.csv", &report::trajectory_csv(&run))?;
            let series = evaluate(&run.epochs, &data.groundtruth)?;
            let ate = run_ate(&run.epochs, &data.groundtruth)?;
            write_eval(&common.out, &series, ate)?;
            write(&common.out, "init_report.csv", &report::init_report_csv(run.init.as_ref(), &truth.anchors))?;
            for w in &run.warnings {
                eprintln!("warning: {w}");
            }
            Ok(format!("mode {} ate {ate:.4} m, init at {:?}", cfg.mode.name(), run.init_stamp()))
        }
        Command::Montecarlo { common, mode, runs } => {
            let cfg = load(&common)?;
            let modes: Vec<Mode> = mode.map(|m| vec![m]).unwrap_or_else(|| Mode::ALL.to_vec());
            let runs = runs.unwrap_or(cfg.runs);
            if runs == 0 {
                return Err(Error::Config("--runs must be positive".into()));
            }
            fs::create_dir_all(&common.out)?;
            let results = monte_carlo(&cfg, &modes, runs)?;
            let mut nees = String::from("# averaging: mean over runs\nmode,stamp,nees_ori,nees_pos\n");
            let mut ate = String::from("mode,runs,mean_ate_m,mean_nees_ori,mean_nees_pos\n");
            let mut per_run = String::from("mode,seed,ate_m,nees_ori,nees_pos,yaw_sigma_drop,init_error_m\n");
            for m in &modes {
                let series: Vec<EvalSeries> = results.iter().filter(|r| r.mode == *m).map(|r| r.series.clone()).collect();
                for (t, o, p) in mean_nees_series(&series) {
                    writeln!(nees, "{},{t:.6},{o:.6},{p:.6}", m.name()).unwrap();
                }
                let s = summarize(&results, *m);
                writeln!(ate, "{},{},{:.6},{:.6},{:.6}", m.name(), s.runs, s.ate, s.nees_ori, s.nees_pos).unwrap();
            }
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into());
            for r in &results {
                writeln!(per_run, "{},{},{:.6},{:.6},{:.6},{},{}", r.mode.name(), r.seed, r.ate, r.nees_ori, r.nees_pos, opt(r.yaw_drop), opt(r.init_error)).unwrap();
            }
            write(&common.out, "nees.csv", &nees)?;
            write(&common.out, "ate.txt", &ate)?;
            write(&common.out, "runs.csv", &per_run)?;
            Ok(format!("{} runs x {} modes written to {}", runs, modes.len(), common.out.display()))
        }
        Command::ObsReport { common } => {
            let cfg = load(&common)?;
            let mut obs = cfg.obs;
            if let Some(s) = common.seed {
                obs.seed = s;
            }
            let trajectories = if common.config.is_some() {
                vec![cfg.sim.trajectory.clone()]
            } else {
                vec![TrajectorySpec::figure_eight(), TrajectorySpec::circle(), TrajectorySpec::random_waypoints()]
            };
            let mut rows = Vec::new();
            for t in trajectories {
                let sim = SimConfig { trajectory: t.clone(), ..cfg.sim.clone() };
                rows.push((t.name().to_string(), report::obs_report_rows(&sim, &obs)?));
            }
            fs::create_dir_all(&common.out)?;
            write(&common.out, "obs_report.csv", &report::obs_report_csv(&rows))?;
            Ok(format!("observability report for {} trajectories", rows.len()))
        }
        Command::Evaluate { trajectory, data, out } => {
            let epochs = report::parse_trajectory(&fs::read_to_string(&trajectory)?)?;
            let gt = SimData::read(&data)?.groundtruth;
            let series = evaluate(&epochs, &gt)?;
            let ate = run_ate(&epochs, &gt)?;
            fs::create_dir_all(&out)?;
            write_eval(&out, &series, ate)?;
            Ok(format!("{} epochs evaluated, ate {ate:.4} m", series.points.len()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::from(1)
        }
    }
}

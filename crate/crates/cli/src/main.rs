//! `otakf`: simulate trajectories, filter them with fixed or adapted noise statistics, and run
//! the drift benchmark suites.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use otakf::adapt::run_otak_filter;
use otakf::ekf::{initial_mean, run_filter};
use otakf::harness::{self, run_suite};
use otakf::ssm::{csv, simulate};
use otakf::{NoiseParams, StateEstimate, Trajectory};

use config::{covariance_for, resolve, spec_for, Extras, FilterMethod, Flags, Mode, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<otakf::Error> for CliError {
    fn from(e: otakf::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "otakf",
    version,
    about = "Online OT adaptation of Kalman filter noise statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories and write them as CSV.
    Simulate {
        #[command(flatten)]
        flags: Flags,
    },
    /// Filter trajectory CSVs with fixed or adapted noise statistics.
    Filter {
        #[command(flatten)]
        flags: Flags,
        /// Trajectory CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run a Monte-Carlo drift suite.
    Bench {
        #[command(flatten)]
        flags: Flags,
        /// lorenz-drift, ablation or nclt-synthetic.
        #[arg(long)]
        suite: Option<String>,
        /// Comma-separated drift levels in dB (defaults depend on the suite).
        #[arg(long, allow_hyphen_values = true)]
        levels: Option<String>,
        /// 100 runs per scenario unless --runs is given.
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let env_seed = std::env::var("OTAKF_SEED").ok();
    let result = match &cli.command {
        Command::Simulate { flags } => resolve(Mode::Simulate, flags, &Extras::default(), env_seed)
            .and_then(|c| cmd_simulate(&c)),
        Command::Filter { flags, inputs } => {
            resolve(Mode::Filter, flags, &Extras::default(), env_seed)
                .and_then(|c| cmd_filter(&c, inputs))
        }
        Command::Bench {
            flags,
            suite,
            levels,
            full,
        } => {
            let extras = Extras {
                suite: suite.clone(),
                levels: levels.clone(),
                full: *full,
            };
            resolve(Mode::Bench, flags, &extras, env_seed).and_then(|c| cmd_bench(&c))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg
        .out
        .as_deref()
        .expect("resolved config has an output directory");
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_comments<W: Write>(w: &mut W, lines: &[String]) -> Result<(), CliError> {
    for l in lines {
        writeln!(w, "# {l}")?;
    }
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = spec_for(&cfg.model)?;
    let cov = covariance_for(&spec, cfg.nu_db, cfg.inv_r2_db)?;
    let dir = out_dir(cfg)?;
    // The per-run seed is written by the trajectory writer itself.
    let echo: Vec<String> = cfg
        .echo(Mode::Simulate)
        .into_iter()
        .filter(|l| !l.starts_with("seed="))
        .collect();
    let x0 = spec.default_initial_state();
    for r in 0..cfg.runs {
        let seed = cfg.seed + r as u64;
        let traj = simulate(&spec, &cov, &x0, cfg.steps, seed)?;
        let path = dir.join(format!("traj_{}_seed{seed}.csv", cfg.model));
        let mut w = create(&path)?;
        csv::write_trajectory(&mut w, &traj, &echo)?;
        w.flush()?;
        println!(
            "{}: T={} n={} m={} seed={seed}",
            path.display(),
            traj.len(),
            spec.state_dim(),
            spec.meas_dim()
        );
    }
    Ok(())
}

fn read_input(path: &Path, cfg: &RunConfig) -> Result<Trajectory, CliError> {
    let spec = spec_for(&cfg.model)?;
    let f = File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    csv::read_trajectory(BufReader::new(f), &spec)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_filter(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    let spec = spec_for(&cfg.model)?;
    let dir = out_dir(cfg)?;
    let echo = cfg.echo(Mode::Filter);
    let cov = if cfg.oracle {
        covariance_for(&spec, cfg.nu_db, cfg.inv_r2_db)?
    } else {
        covariance_for(&spec, 0.0, 0.0)?
    };
    let theta0 = NoiseParams::from_covariances(&cov);
    let n = spec.state_dim();
    let cov0 = DMatrix::identity(n, n);
    for input in inputs {
        let traj = read_input(input, cfg)?;
        let x0 = initial_mean(&traj);
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        let estimates: Vec<StateEstimate> = match cfg.method {
            FilterMethod::Fixed => run_filter(&traj, &theta0, &x0, &cov0)?,
            FilterMethod::Otak => {
                let mut acfg = cfg.adapt;
                acfg.seed = traj.seed.unwrap_or(cfg.seed);
                let run = run_otak_filter(&traj, &theta0, &acfg, &x0, &cov0)?;
                write_diagnostics(
                    &dir.join(format!("{stem}_diagnostics.csv")),
                    &echo,
                    &run.diagnostics,
                    &acfg,
                )?;
                write_theta(&dir.join(format!("{stem}_theta.csv")), &echo, &run.thetas)?;
                run.estimates
            }
        };
        let path = dir.join(format!("{stem}_estimates.csv"));
        let mse_db = write_estimates(&path, &echo, &estimates, &traj)?;
        match mse_db {
            Some(db) => println!("{}: mse_db={db:.4}", input.display()),
            None => println!("{}: no ground truth, estimates written", input.display()),
        }
    }
    Ok(())
}

/// `t,xhat1..xhatn,mse`; `mse` is `‖x̂ − x‖²/n` against the stored state.
fn write_estimates(
    path: &Path,
    echo: &[String],
    estimates: &[StateEstimate],
    traj: &Trajectory,
) -> Result<Option<f64>, CliError> {
    let n = traj.spec.state_dim();
    let mut w = create(path)?;
    write_comments(&mut w, echo)?;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("xhat{i}")));
    cols.push("mse".into());
    writeln!(w, "{}", cols.join(","))?;
    let have_truth = traj.states.len() == estimates.len();
    for (k, e) in estimates.iter().enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(e.mean.iter().map(|v| format!("{v:?}")));
        if have_truth {
            row.push(format!(
                "{:?}",
                (&e.mean - &traj.states[k]).norm_squared() / n as f64
            ));
        } else {
            row.push(String::new());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    if !have_truth {
        return Ok(None);
    }
    let means: Vec<_> = estimates.iter().map(|e| e.mean.clone()).collect();
    Ok(Some(harness::mse_db(&means, &traj.states)?))
}

fn write_diagnostics(
    path: &Path,
    echo: &[String],
    diags: &[otakf::adapt::StepDiagnostics],
    acfg: &otakf::AdaptConfig,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_comments(&mut w, echo)?;
    let (n, m) = diags
        .first()
        .map_or((0, 0), |d| (d.q_var.len(), d.r_var.len()));
    let mut cols = vec!["t".to_string(), "lr".into()];
    cols.extend((1..=acfg.inner_iters).map(|k| format!("loss{k}")));
    cols.extend(["skipped".to_string(), "clamped".to_string()]);
    cols.extend((1..=n).map(|i| format!("q_var{i}")));
    cols.extend((1..=m).map(|i| format!("r_var{i}")));
    writeln!(w, "{}", cols.join(","))?;
    for d in diags {
        let mut row = vec![d.t.to_string(), format!("{:?}", d.lr)];
        for k in 0..acfg.inner_iters {
            row.push(
                d.losses
                    .get(k)
                    .map(|v| format!("{v:?}"))
                    .unwrap_or_default(),
            );
        }
        row.push(u8::from(d.skipped).to_string());
        row.push(u8::from(d.clamped).to_string());
        row.extend(d.q_var.iter().chain(&d.r_var).map(|v| format!("{v:?}")));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `t,log_q1..n,log_r1..m`: the parameters used for the update at each step.
fn write_theta(path: &Path, echo: &[String], thetas: &[NoiseParams]) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_comments(&mut w, echo)?;
    let (n, m) = thetas
        .first()
        .map_or((0, 0), |t| (t.log_q.len(), t.log_r.len()));
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("log_q{i}")));
    cols.extend((1..=m).map(|i| format!("log_r{i}")));
    writeln!(w, "{}", cols.join(","))?;
    for (k, th) in thetas.iter().enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(th.to_vec().iter().map(|v| format!("{v:?}")));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let suite = cfg.suite;
    let dir = out_dir(cfg)?;
    let echo = cfg.echo(Mode::Bench);
    let levels = cfg.levels.clone().unwrap_or_else(|| suite.default_levels());
    let base = suite.base_scenario(cfg.steps, cfg.runs, cfg.seed, cfg.adapt)?;
    let report = run_suite(suite, &base, &levels, 25)?;

    let id = suite.id();
    let mut w = create(&dir.join(format!("{id}.json")))?;
    let doc = serde_json::json!({
        "otakf_version": otakf::VERSION,
        "config": cfg.echo_map(Mode::Bench),
        "report": report,
    });
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;

    let mut w = create(&dir.join(format!("{id}_runs.csv")))?;
    write_comments(&mut w, &echo)?;
    report.write_runs_csv(&mut w)?;
    w.flush()?;

    let mut w = create(&dir.join(format!("{id}_curves.csv")))?;
    write_comments(&mut w, &echo)?;
    report.write_curves_csv(&mut w)?;
    w.flush()?;

    print!("{}", report.summary());
    println!("results written to {}", dir.display());
    if report.completed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "suite {id}: at least one method exceeded the {}% failure limit",
            harness::MAX_FAILURE_FRACTION * 100.0
        )))
    }
}

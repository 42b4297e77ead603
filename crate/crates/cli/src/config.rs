//! Run configuration: defaults, then `OTAKF_SEED`, then a `key=value` file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use otakf::harness::Suite;
use otakf::ssm::covariance_from_ratio;
use otakf::{AdaptConfig, CovariancePair, EpsilonPolicy, SsmSpec};

use crate::CliError;

/// Flags shared by every subcommand. All optional so that precedence can be resolved later.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// State-space model: lorenz, nclt or linear1d.
    #[arg(long)]
    pub model: Option<String>,
    /// Trajectory length.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trajectories (simulate) or Monte-Carlo runs (bench).
    #[arg(long)]
    pub runs: Option<usize>,
    /// True measurement-noise level 1/r² in dB.
    #[arg(long = "inv-r2-db", allow_hyphen_values = true)]
    pub inv_r2_db: Option<f64>,
    /// Process-to-measurement variance ratio ν in dB.
    #[arg(long = "nu-db", allow_hyphen_values = true)]
    pub nu_db: Option<f64>,
    /// Filter: fixed or otak.
    #[arg(long)]
    pub method: Option<String>,
    /// Filter with the true covariances given by --inv-r2-db/--nu-db.
    #[arg(long)]
    pub oracle: bool,
    /// Residual window length.
    #[arg(long = "W")]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Parameter updates per time step.
    #[arg(long = "inner-k")]
    pub inner_k: Option<usize>,
    /// IPOT outer iterations.
    #[arg(long = "ipot-iters")]
    pub ipot_iters: Option<usize>,
    /// Cap on IPOT scaling sweeps per outer iteration.
    #[arg(long = "ipot-inner")]
    pub ipot_inner: Option<usize>,
    /// ε as a multiple of the median transport cost.
    #[arg(long = "epsilon-scale")]
    pub epsilon_scale: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value file; keys are the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Filter,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMethod {
    Fixed,
    Otak,
}

/// Every setting with its final value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub steps: usize,
    pub seed: u64,
    pub runs: usize,
    pub inv_r2_db: f64,
    pub nu_db: f64,
    pub method: FilterMethod,
    pub oracle: bool,
    pub adapt: AdaptConfig,
    pub epsilon_scale: f64,
    pub out: Option<PathBuf>,
    pub suite: Suite,
    pub levels: Option<Vec<f64>>,
    pub full: bool,
}

const KEYS: &[&str] = &[
    "model",
    "T",
    "seed",
    "runs",
    "inv-r2-db",
    "nu-db",
    "method",
    "oracle",
    "W",
    "lr",
    "particles",
    "inner-k",
    "ipot-iters",
    "ipot-inner",
    "epsilon-scale",
    "out",
    "suite",
    "levels",
    "full",
];

pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let k = k.trim().trim_start_matches("--");
        if !KEYS.contains(&k) {
            return Err(format!("line {}: unknown key '{k}'", i + 1));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid value '{v}' for {key}"))),
    }
}

fn parse_levels(v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',').map(|x| parse("levels", x.trim())).collect()
}

/// Subcommand-specific extras that are not shared flags.
#[derive(Debug, Clone, Default)]
pub struct Extras {
    pub suite: Option<String>,
    pub levels: Option<String>,
    pub full: bool,
}

pub fn resolve(
    mode: Mode,
    flags: &Flags,
    extras: &Extras,
    env_seed: Option<String>,
) -> Result<RunConfig, CliError> {
    let bench = mode == Mode::Bench;
    let mut cfg = RunConfig {
        model: "lorenz".into(),
        steps: 100,
        seed: 0,
        runs: if bench { 20 } else { 1 },
        inv_r2_db: 0.0,
        nu_db: 0.0,
        method: FilterMethod::Fixed,
        oracle: false,
        adapt: if bench {
            otakf::harness::suite_adapt_config()
        } else {
            AdaptConfig::default()
        },
        epsilon_scale: match EpsilonPolicy::default() {
            EpsilonPolicy::MedianScaled { scale, .. } => scale,
            EpsilonPolicy::Fixed { .. } => unreachable!("default policy is median-scaled"),
        },
        out: bench.then(|| PathBuf::from("results")),
        suite: Suite::LorenzDrift,
        levels: None,
        full: false,
    };
    if let Some(s) = env_seed {
        cfg.seed = parse("OTAKF_SEED", s.trim())?;
    }
    let file = match &flags.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    for (k, v) in &file {
        apply(&mut cfg, k, v)?;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<(), CliError> {
        match v {
            Some(v) => apply(&mut cfg, k, &v),
            None => Ok(()),
        }
    };
    set("model", flags.model.clone())?;
    set("T", flags.steps.map(|v| v.to_string()))?;
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("runs", flags.runs.map(|v| v.to_string()))?;
    set("inv-r2-db", flags.inv_r2_db.map(|v| format!("{v:?}")))?;
    set("nu-db", flags.nu_db.map(|v| format!("{v:?}")))?;
    set("method", flags.method.clone())?;
    set("oracle", flags.oracle.then(|| "true".into()))?;
    set("W", flags.window.map(|v| v.to_string()))?;
    set("lr", flags.lr.map(|v| format!("{v:?}")))?;
    set("particles", flags.particles.map(|v| v.to_string()))?;
    set("inner-k", flags.inner_k.map(|v| v.to_string()))?;
    set("ipot-iters", flags.ipot_iters.map(|v| v.to_string()))?;
    set("ipot-inner", flags.ipot_inner.map(|v| v.to_string()))?;
    set(
        "epsilon-scale",
        flags.epsilon_scale.map(|v| format!("{v:?}")),
    )?;
    set("out", flags.out.as_ref().map(|p| p.display().to_string()))?;
    set("suite", extras.suite.clone())?;
    set("levels", extras.levels.clone())?;
    set("full", extras.full.then(|| "true".into()))?;

    if cfg.full && flags.runs.is_none() && !file.contains_key("runs") {
        cfg.runs = 100;
    }
    cfg.adapt.seed = cfg.seed;
    cfg.adapt.epsilon = EpsilonPolicy::MedianScaled {
        scale: cfg.epsilon_scale,
        floor: 1e-6,
    };
    cfg.adapt
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid adaptation settings: {e}")))?;
    if !(cfg.epsilon_scale > 0.0 && cfg.epsilon_scale.is_finite()) {
        return Err(CliError::Usage("epsilon-scale must be positive".into()));
    }
    if cfg.runs == 0 || cfg.steps == 0 {
        return Err(CliError::Usage("T and runs must be positive".into()));
    }
    if cfg.out.is_none() {
        return Err(CliError::Usage("missing required --out <dir>".into()));
    }
    spec_for(&cfg.model)?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> Result<(), CliError> {
    match key {
        "model" => cfg.model = v.to_string(),
        "T" => cfg.steps = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "runs" => cfg.runs = parse(key, v)?,
        "inv-r2-db" => cfg.inv_r2_db = parse(key, v)?,
        "nu-db" => cfg.nu_db = parse(key, v)?,
        "method" => {
            cfg.method = match v {
                "fixed" => FilterMethod::Fixed,
                "otak" => FilterMethod::Otak,
                _ => {
                    return Err(CliError::Usage(format!(
                        "unknown method '{v}' (fixed|otak)"
                    )))
                }
            }
        }
        "oracle" => cfg.oracle = parse_bool(key, v)?,
        "W" => cfg.adapt.window = parse(key, v)?,
        "lr" => cfg.adapt.lr = parse(key, v)?,
        "particles" => cfg.adapt.particles = parse(key, v)?,
        "inner-k" => cfg.adapt.inner_iters = parse(key, v)?,
        "ipot-iters" => cfg.adapt.ipot_iters = parse(key, v)?,
        "ipot-inner" => cfg.adapt.ipot_inner = parse(key, v)?,
        "epsilon-scale" => cfg.epsilon_scale = parse(key, v)?,
        "out" => cfg.out = Some(PathBuf::from(v)),
        "suite" => cfg.suite = v.parse().map_err(|e| CliError::Usage(format!("{e}")))?,
        "levels" => cfg.levels = Some(parse_levels(v)?),
        "full" => cfg.full = parse_bool(key, v)?,
        _ => return Err(CliError::Usage(format!("unknown key '{key}'"))),
    }
    Ok(())
}

pub fn spec_for(model: &str) -> Result<SsmSpec, CliError> {
    match model {
        "lorenz" => Ok(SsmSpec::lorenz()),
        "nclt" => Ok(SsmSpec::nclt()),
        "linear1d" => Ok(SsmSpec::linear_1d()),
        _ => Err(CliError::Usage(format!(
            "unknown model '{model}' (lorenz|nclt|linear1d)"
        ))),
    }
}

/// Covariances at the given noise levels. The kinematic model scales its reference pair
/// (`Q = diag(1, 1, 1e-3, 1e-3, 1e-3)`, `R = 100 I`) instead of using isotropic noise.
pub fn covariance_for(
    spec: &SsmSpec,
    nu_db: f64,
    inv_r2_db: f64,
) -> Result<CovariancePair, CliError> {
    if spec.name() == "nclt" {
        let r = 100.0 * 10f64.powf(-inv_r2_db / 10.0);
        let q = 10f64.powf(nu_db / 10.0);
        CovariancePair::diagonal(&[q, q, 1e-3 * q, 1e-3 * q, 1e-3 * q], &[r, r])
            .map_err(|e| CliError::Runtime(e.to_string()))
    } else {
        Ok(covariance_from_ratio(nu_db, inv_r2_db, spec))
    }
}

impl RunConfig {
    /// `key=value` lines describing every resolved setting.
    pub fn echo(&self, mode: Mode) -> Vec<String> {
        let mut lines = vec![format!("otakf {}", otakf::VERSION)];
        let a = &self.adapt;
        let mut kv: Vec<(&str, String)> = vec![
            ("model", self.model.clone()),
            ("T", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("runs", self.runs.to_string()),
            ("inv-r2-db", format!("{:?}", self.inv_r2_db)),
            ("nu-db", format!("{:?}", self.nu_db)),
        ];
        if mode != Mode::Simulate {
            kv.extend([
                (
                    "method",
                    match self.method {
                        FilterMethod::Fixed => "fixed".to_string(),
                        FilterMethod::Otak => "otak".to_string(),
                    },
                ),
                ("oracle", self.oracle.to_string()),
                ("W", a.window.to_string()),
                ("lr", format!("{:?}", a.lr)),
                ("weight-decay", format!("{:?}", a.weight_decay)),
                ("particles", a.particles.to_string()),
                ("inner-k", a.inner_iters.to_string()),
                ("ipot-iters", a.ipot_iters.to_string()),
                ("ipot-inner", a.ipot_inner.to_string()),
                ("ipot-tol", format!("{:?}", a.ipot_tol)),
                ("epsilon-scale", format!("{:?}", self.epsilon_scale)),
                ("warmup", a.warmup.to_string()),
                ("mask", format!("{:?}", a.mask)),
                ("adam-betas", format!("{:?},{:?}", a.beta1, a.beta2)),
            ]);
        }
        if mode == Mode::Bench {
            kv.push(("suite", self.suite.id().to_string()));
            if let Some(l) = &self.levels {
                kv.push((
                    "levels",
                    l.iter()
                        .map(|x| format!("{x:?}"))
                        .collect::<Vec<_>>()
                        .join(","),
                ));
            }
        }
        if let Some(o) = &self.out {
            kv.push(("out", o.display().to_string()));
        }
        lines.extend(kv.into_iter().map(|(k, v)| format!("{k}={v}")));
        lines
    }

    pub fn echo_map(&self, mode: Mode) -> BTreeMap<String, String> {
        self.echo(mode)
            .into_iter()
            .skip(1)
            .filter_map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
            })
            .collect()
    }
}

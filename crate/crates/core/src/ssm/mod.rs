//! State-space models and seeded trajectory generation.
//!
//! Three discrete-time models are provided:
//!
//! - the Lorenz attractor, discretized as `x_t = exp(A(x_{t-1}) dt) x_{t-1}` with a
//!   state-dependent matrix `A` and an identity measurement;
//! - a planar kinematic model `[px, py, vx, vy, heading]` driven by an exogenous speed
//!   command, observed through its position;
//! - a scalar linear-Gaussian model `x_t = a x_{t-1}` used for oracle checks.

pub mod csv;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{check_psd, expm_taylor, psd_factor};

/// Default truncation order for the Lorenz matrix exponential.
pub const DEFAULT_TAYLOR_ORDER: usize = 10;
/// Noise-free steps applied to `(1, 1, 1)` to land on the attractor.
pub const LORENZ_BURN_IN: usize = 100;

const SIGMA: f64 = 10.0;
const RHO: f64 = 28.0;
const BETA: f64 = 8.0 / 3.0;

/// The model family with its variant-specific constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Dynamics {
    Lorenz { taylor_order: usize },
    NcltKinematic,
    Linear1d { coeff: f64 },
}

/// A state-space model: dynamics plus sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmSpec {
    pub dynamics: Dynamics,
    pub dt: f64,
}

impl SsmSpec {
    pub fn new(dynamics: Dynamics, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if let Dynamics::Lorenz { taylor_order } = dynamics {
            if taylor_order == 0 {
                return Err(Error::InvalidInput("taylor_order must be >= 1".into()));
            }
        }
        if let Dynamics::Linear1d { coeff } = dynamics {
            if !coeff.is_finite() {
                return Err(Error::InvalidInput(
                    "linear coefficient must be finite".into(),
                ));
            }
        }
        Ok(Self { dynamics, dt })
    }

    /// Lorenz attractor with `dt = 0.02` and the default Taylor order.
    pub fn lorenz() -> Self {
        Self {
            dynamics: Dynamics::Lorenz {
                taylor_order: DEFAULT_TAYLOR_ORDER,
            },
            dt: 0.02,
        }
    }

    /// Planar kinematic model with `dt = 1`.
    pub fn nclt() -> Self {
        Self {
            dynamics: Dynamics::NcltKinematic,
            dt: 1.0,
        }
    }

    /// Scalar random walk (`a = 1`, `dt = 1`).
    pub fn linear_1d() -> Self {
        Self {
            dynamics: Dynamics::Linear1d { coeff: 1.0 },
            dt: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.dynamics {
            Dynamics::Lorenz { .. } => "lorenz",
            Dynamics::NcltKinematic => "nclt",
            Dynamics::Linear1d { .. } => "linear1d",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Lorenz { .. } => 3,
            Dynamics::NcltKinematic => 5,
            Dynamics::Linear1d { .. } => 1,
        }
    }

    pub fn meas_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Lorenz { .. } => 3,
            Dynamics::NcltKinematic => 2,
            Dynamics::Linear1d { .. } => 1,
        }
    }

    /// Whether the model consumes a per-step speed command.
    pub fn uses_control(&self) -> bool {
        matches!(self.dynamics, Dynamics::NcltKinematic)
    }

    fn check_state(&self, x: &DVector<f64>, context: &'static str) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
                context,
            });
        }
        Ok(())
    }

    /// Noise-free transition `f(x)`. `control` is the speed command (ignored by models without one).
    pub fn transition(&self, x: &DVector<f64>, control: f64) -> Result<DVector<f64>> {
        self.check_state(x, "transition state")?;
        match self.dynamics {
            Dynamics::Lorenz { taylor_order } => lorenz_transition(x, self.dt, taylor_order),
            Dynamics::NcltKinematic => nclt_transition(x, control, self.dt),
            Dynamics::Linear1d { coeff } => Ok(x * coeff),
        }
    }

    /// Noise-free measurement `h(x)`.
    pub fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x, "measurement state")?;
        Ok(match self.dynamics {
            Dynamics::Lorenz { .. } | Dynamics::Linear1d { .. } => x.clone(),
            Dynamics::NcltKinematic => x.rows(0, 2).into_owned(),
        })
    }

    /// The (constant) measurement Jacobian `H`. Every model here has a linear measurement.
    pub fn measurement_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.meas_dim());
        let mut h = DMatrix::zeros(m, n);
        for i in 0..m {
            h[(i, i)] = 1.0;
        }
        h
    }

    /// Default starting state: `(1,1,1)` pushed through a noise-free burn-in for Lorenz, zeros otherwise.
    pub fn default_initial_state(&self) -> DVector<f64> {
        match self.dynamics {
            Dynamics::Lorenz { .. } => {
                let mut x = DVector::from_element(3, 1.0);
                for _ in 0..LORENZ_BURN_IN {
                    x = self.transition(&x, 0.0).expect("burn-in state is finite");
                }
                x
            }
            _ => DVector::zeros(self.state_dim()),
        }
    }
}

/// The state-dependent Lorenz matrix `A(x)`.
pub fn lorenz_matrix(x: &DVector<f64>) -> DMatrix<f64> {
    let x1 = x[0];
    DMatrix::from_row_slice(3, 3, &[-SIGMA, SIGMA, 0.0, RHO, -1.0, -x1, 0.0, x1, -BETA])
}

/// One discretized Lorenz step `exp(A(x) dt) x` with a truncated Taylor exponential.
pub fn lorenz_transition(x: &DVector<f64>, dt: f64, taylor_order: usize) -> Result<DVector<f64>> {
    if taylor_order == 0 {
        return Err(Error::InvalidInput("taylor_order must be >= 1".into()));
    }
    if x.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: x.len(),
            context: "lorenz state",
        });
    }
    if x.iter().any(|v| !v.is_finite()) || !dt.is_finite() {
        return Err(Error::InvalidInput("non-finite Lorenz input".into()));
    }
    let phi = expm_taylor(&(lorenz_matrix(x) * dt), taylor_order);
    Ok(phi * x)
}

/// Kinematic step: position advances by `dt * v_c` along the heading, velocity is re-derived from it.
pub fn nclt_transition(x: &DVector<f64>, speed: f64, dt: f64) -> Result<DVector<f64>> {
    if x.len() != 5 {
        return Err(Error::DimensionMismatch {
            expected: 5,
            got: x.len(),
            context: "nclt state",
        });
    }
    let heading = x[4];
    let (s, c) = heading.sin_cos();
    Ok(DVector::from_vec(vec![
        x[0] + dt * speed * c,
        x[1] + dt * speed * s,
        speed * c,
        speed * s,
        heading,
    ]))
}

/// Process and measurement covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePair {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CovariancePair {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_psd(&q, 1e-10, 1e-12, "Q")?;
        check_psd(&r, 1e-10, 1e-12, "R")?;
        Ok(Self { q, r })
    }

    pub fn isotropic(q_var: f64, r_var: f64, spec: &SsmSpec) -> Result<Self> {
        let (n, m) = (spec.state_dim(), spec.meas_dim());
        Self::new(
            DMatrix::identity(n, n) * q_var,
            DMatrix::identity(m, m) * r_var,
        )
    }

    pub fn diagonal(q_diag: &[f64], r_diag: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(q_diag)),
            DMatrix::from_diagonal(&DVector::from_column_slice(r_diag)),
        )
    }

    pub fn check_dims(&self, spec: &SsmSpec) -> Result<()> {
        if self.q.nrows() != spec.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.state_dim(),
                got: self.q.nrows(),
                context: "Q",
            });
        }
        if self.r.nrows() != spec.meas_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.meas_dim(),
                got: self.r.nrows(),
                context: "R",
            });
        }
        Ok(())
    }
}

/// `r² = 10^(-inv_r2_db/10)`, `q² = r² · 10^(nu_db/10)`, `Q = q² I`, `R = r² I`.
pub fn covariance_from_ratio(nu_db: f64, inv_r2_db: f64, spec: &SsmSpec) -> CovariancePair {
    let r2 = 10f64.powf(-inv_r2_db / 10.0);
    let q2 = r2 * 10f64.powf(nu_db / 10.0);
    CovariancePair::isotropic(q2, r2, spec).expect("isotropic covariances are PSD")
}

/// Piecewise-constant speed-command generator for synthetic kinematic runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub segment_len: usize,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        Self {
            segment_len: 25,
            min_speed: 0.5,
            max_speed: 2.0,
        }
    }
}

impl SpeedProfile {
    pub fn generate(&self, steps: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let seg = self.segment_len.max(1);
        let mut out = Vec::with_capacity(steps);
        let mut speed = 0.0;
        for t in 0..steps {
            if t % seg == 0 {
                speed = rng.random_range(self.min_speed..=self.max_speed);
            }
            out.push(speed);
        }
        out
    }
}

/// A realized trajectory: true states, noisy measurements and (optionally) speed commands.
///
/// Index `k` of `states`/`measurements`/`controls` is time step `t = k + 1`; the state at
/// `t = 0` is `initial_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec: SsmSpec,
    pub true_cov: Option<CovariancePair>,
    pub seed: Option<u64>,
    pub initial_state: Option<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub controls: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Speed command applied on the transition into step index `k`.
    pub fn control(&self, k: usize) -> f64 {
        self.controls.as_ref().map_or(0.0, |c| c[k])
    }

    /// SHA-256 over the bit patterns of every stored number.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: f64| h.update(v.to_bits().to_le_bytes());
        if let Some(x0) = &self.initial_state {
            x0.iter().copied().for_each(&mut feed);
        }
        for (x, y) in self.states.iter().zip(&self.measurements) {
            x.iter().copied().for_each(&mut feed);
            y.iter().copied().for_each(&mut feed);
        }
        if let Some(c) = &self.controls {
            c.iter().copied().for_each(&mut feed);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Samples `x_t = f(x_{t-1}) + w_t`, `y_t = h(x_t) + v_t` for `t = 1..=steps`.
///
/// Speed commands for the kinematic model come from [`SpeedProfile::default`] seeded with `seed`.
pub fn simulate(
    spec: &SsmSpec,
    cov: &CovariancePair,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let controls = spec
        .uses_control()
        .then(|| SpeedProfile::default().generate(steps, seed));
    simulate_with_controls(spec, cov, x0, steps, seed, controls)
}

pub fn simulate_with_controls(
    spec: &SsmSpec,
    cov: &CovariancePair,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    controls: Option<Vec<f64>>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidInput("trajectory length must be >= 1".into()));
    }
    cov.check_dims(spec)?;
    // Re-validate: fields are public and may have been edited after construction.
    let cov = CovariancePair::new(cov.q.clone(), cov.r.clone())?;
    spec.check_state(x0, "initial state")?;
    if let Some(c) = &controls {
        if c.len() != steps {
            return Err(Error::DimensionMismatch {
                expected: steps,
                got: c.len(),
                context: "speed commands",
            });
        }
    }
    let (n, m) = (spec.state_dim(), spec.meas_dim());
    let lq = psd_factor(&cov.q);
    let lr = psd_factor(&cov.r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = controls.as_ref().map_or(0.0, |c| c[k]);
        let w = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let v = DVector::<f64>::from_fn(m, |_, _| rng.sample(StandardNormal));
        x = spec.transition(&x, u)? + &lq * w;
        let y = spec.measure(&x)? + &lr * v;
        states.push(x.clone());
        measurements.push(y);
    }
    Ok(Trajectory {
        spec: *spec,
        true_cov: Some(cov),
        seed: Some(seed),
        initial_state: Some(x0.clone()),
        states,
        measurements,
        controls,
    })
}

//! Extended Kalman filter with log-parameterized diagonal noise covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::ssm::{CovariancePair, Dynamics, SsmSpec, Trajectory};

/// Bound on every log standard deviation in [`NoiseParams`].
pub const LOG_STD_LIMIT: f64 = 12.0;

/// Mean and covariance of a Gaussian state belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl StateEstimate {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.nrows(),
                context: "state covariance",
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(self.cov.iter())
            .all(|v| v.is_finite())
    }
}

/// Adaptable noise parameters: log standard deviations of diagonal `Q̂` and `R̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub log_q: DVector<f64>,
    pub log_r: DVector<f64>,
}

impl NoiseParams {
    /// Builds from per-axis variances. Non-positive variances map to the lower clamp.
    pub fn from_variances(q_var: &[f64], r_var: &[f64]) -> Self {
        let to_log = |v: &f64| {
            if *v > 0.0 {
                (0.5 * v.ln()).clamp(-LOG_STD_LIMIT, LOG_STD_LIMIT)
            } else {
                -LOG_STD_LIMIT
            }
        };
        Self {
            log_q: DVector::from_iterator(q_var.len(), q_var.iter().map(to_log)),
            log_r: DVector::from_iterator(r_var.len(), r_var.iter().map(to_log)),
        }
    }

    /// Uses the diagonals of `cov`; off-diagonal terms cannot be represented and are dropped.
    pub fn from_covariances(cov: &CovariancePair) -> Self {
        let q: Vec<f64> = cov.q.diagonal().iter().copied().collect();
        let r: Vec<f64> = cov.r.diagonal().iter().copied().collect();
        Self::from_variances(&q, &r)
    }

    pub fn q_var(&self) -> DVector<f64> {
        self.log_q.map(|l| (2.0 * l).exp())
    }

    pub fn r_var(&self) -> DVector<f64> {
        self.log_r.map(|l| (2.0 * l).exp())
    }

    pub fn q_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q_var())
    }

    pub fn r_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.r_var())
    }

    pub fn dim(&self) -> usize {
        self.log_q.len() + self.log_r.len()
    }

    /// Flattened `[log_q; log_r]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.log_q
            .iter()
            .chain(self.log_r.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(n: usize, values: &[f64]) -> Self {
        Self {
            log_q: DVector::from_column_slice(&values[..n]),
            log_r: DVector::from_column_slice(&values[n..]),
        }
    }

    fn check(&self, spec: &SsmSpec) -> Result<()> {
        if self.log_q.len() != spec.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.state_dim(),
                got: self.log_q.len(),
                context: "log_q",
            });
        }
        if self.log_r.len() != spec.meas_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.meas_dim(),
                got: self.log_r.len(),
                context: "log_r",
            });
        }
        Ok(())
    }
}

/// The one-step predictive measurement Gaussian `N(h(x̂⁻), S)` together with the pieces
/// the update and the adaptation gradient need.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMeasurement {
    pub mean: DVector<f64>,
    pub s: DMatrix<f64>,
    /// Lower Cholesky factor of `s` (plus `jitter · I` when one was needed).
    pub chol_s: DMatrix<f64>,
    pub jitter: f64,
    /// Measurement Jacobian at the prior mean.
    pub h: DMatrix<f64>,
    pub r_hat: DMatrix<f64>,
}

/// Jacobian of the noise-free transition at `x`.
///
/// Central differences with step `1e-6 · max(1, |x_i|)`; exact for the linear model.
pub fn jacobian_f(x: &DVector<f64>, spec: &SsmSpec, control: f64) -> Result<DMatrix<f64>> {
    let n = spec.state_dim();
    if let Dynamics::Linear1d { coeff } = spec.dynamics {
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
                context: "jacobian state",
            });
        }
        return Ok(DMatrix::from_element(1, 1, coeff));
    }
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (spec.transition(&xp, control)? - spec.transition(&xm, control)?) / (2.0 * h);
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// `x̂⁻ = f(x̂)`, `Σ⁻ = F Σ Fᵀ + Q̂(θ)`.
pub fn predict(
    prev: &StateEstimate,
    theta: &NoiseParams,
    spec: &SsmSpec,
    control: f64,
) -> Result<StateEstimate> {
    theta.check(spec)?;
    let mean = spec.transition(&prev.mean, control)?;
    let f = jacobian_f(&prev.mean, spec, control)?;
    let cov = symmetrize(&(&f * &prev.cov * f.transpose() + theta.q_cov()));
    Ok(StateEstimate { mean, cov })
}

/// `S = H Σ⁻ Hᵀ + R̂(θ)` and its Cholesky factor.
pub fn predictive_measurement(
    prior: &StateEstimate,
    theta: &NoiseParams,
    spec: &SsmSpec,
) -> Result<PredictiveMeasurement> {
    theta.check(spec)?;
    let mean = spec.measure(&prior.mean)?;
    let h = spec.measurement_matrix();
    let r_hat = theta.r_cov();
    let s = symmetrize(&(&h * &prior.cov * h.transpose() + &r_hat));
    let (chol_s, jitter) = cholesky_jittered(&s)?;
    Ok(PredictiveMeasurement {
        mean,
        s,
        chol_s,
        jitter,
        h,
        r_hat,
    })
}

/// Joseph-form measurement update.
pub fn update(
    prior: &StateEstimate,
    pm: &PredictiveMeasurement,
    y: &DVector<f64>,
) -> Result<StateEstimate> {
    if y.len() != pm.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: pm.mean.len(),
            got: y.len(),
            context: "measurement",
        });
    }
    let n = prior.mean.len();
    // K = Σ⁻Hᵀ S⁻¹, solved as S Kᵀ = H Σ⁻ through the Cholesky factor.
    let cross = &pm.h * &prior.cov;
    let l = &pm.chol_s;
    let z = l
        .solve_lower_triangular(&cross)
        .ok_or_else(|| Error::InvalidInput("singular innovation covariance".into()))?;
    let kt = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::InvalidInput("singular innovation covariance".into()))?;
    let k = kt.transpose();
    let innovation = y - &pm.mean;
    let mean = &prior.mean + &k * innovation;
    let ikh = DMatrix::<f64>::identity(n, n) - &k * &pm.h;
    let cov = symmetrize(&(&ikh * &prior.cov * ikh.transpose() + &k * &pm.r_hat * k.transpose()));
    Ok(StateEstimate { mean, cov })
}

/// Initial mean for filtering: the stored `t = 0` state, else the first true state, else the
/// first measurement lifted through the pseudo-inverse of `H`.
pub fn initial_mean(traj: &Trajectory) -> DVector<f64> {
    if let Some(x0) = &traj.initial_state {
        return x0.clone();
    }
    if let Some(x1) = traj.states.first() {
        return x1.clone();
    }
    // H is a coordinate selection, so its pseudo-inverse is Hᵀ.
    traj.spec.measurement_matrix().transpose() * &traj.measurements[0]
}

/// Fixed-parameter filtering pass over every measurement of `traj`.
pub fn run_filter(
    traj: &Trajectory,
    theta: &NoiseParams,
    x0: &DVector<f64>,
    cov0: &DMatrix<f64>,
) -> Result<Vec<StateEstimate>> {
    if traj.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let spec = &traj.spec;
    let mut est = StateEstimate::new(x0.clone(), cov0.clone())?;
    let mut out = Vec::with_capacity(traj.len());
    for (k, y) in traj.measurements.iter().enumerate() {
        let prior = predict(&est, theta, spec, traj.control(k))?;
        let pm = predictive_measurement(&prior, theta, spec)?;
        est = update(&prior, &pm, y)?;
        out.push(est.clone());
    }
    Ok(out)
}

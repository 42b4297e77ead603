//! Label-free online adaptation of the filter's noise parameters.
//!
//! At every step the filter's predictive measurement Gaussian `N(h(x̂⁻), S(θ))` is sampled
//! through the reparameterization `z_i = h(x̂⁻) + chol(S) ε_i`, a target cloud is formed by
//! shifting the current measurement by each innovation in a sliding window, and `θ` moves
//! down the gradient of the IPOT transport cost between the two clouds.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ekf::{self, NoiseParams, PredictiveMeasurement, StateEstimate, LOG_STD_LIMIT};
use crate::error::{Error, Result};
use crate::ot::{self, DiscreteMeasure, EpsilonPolicy, IpotOptions, TransportPlan};
use crate::ssm::{SsmSpec, Trajectory};

/// Bounded FIFO of the most recent innovations `e_k = y_k − h(x̂_{k|k−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWindow {
    buf: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl ResidualWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("window capacity must be >= 1".into()));
        }
        Ok(Self {
            buf: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    /// Appends `e`, evicting the oldest residual when full.
    pub fn push(&mut self, e: DVector<f64>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buf.iter()
    }
}

/// Sample mean and unbiased (`1/(W−1)`) sample covariance of the stored residuals.
pub fn innovation_stats(window: &ResidualWindow) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = window.len();
    if k < 2 {
        return Err(Error::InsufficientData { needed: 2, have: k });
    }
    let m = window.buf[0].len();
    let mut mean = DVector::zeros(m);
    for e in window.iter() {
        mean += e;
    }
    mean /= k as f64;
    let mut cov = DMatrix::zeros(m, m);
    for e in window.iter() {
        let d = e - &mean;
        cov += &d * d.transpose();
    }
    cov /= (k - 1) as f64;
    Ok((mean, cov))
}

/// Which parameters the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMask {
    All,
    MeasurementOnly,
    ProcessOnly,
}

impl AdaptMask {
    fn flags(self, n: usize, m: usize) -> Vec<bool> {
        let (q, r) = match self {
            AdaptMask::All => (true, true),
            AdaptMask::MeasurementOnly => (false, true),
            AdaptMask::ProcessOnly => (true, false),
        };
        std::iter::repeat_n(q, n)
            .chain(std::iter::repeat_n(r, m))
            .collect()
    }
}

/// Adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptLoss {
    /// Transport cost to the innovation-shifted window.
    Ot,
    /// Transport cost to the single current measurement (no window history).
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Residual window length `W`.
    pub window: usize,
    /// Source particle count `N`.
    pub particles: usize,
    /// Parameter updates per time step `K`.
    pub inner_iters: usize,
    /// Base learning rate `η`.
    pub lr: f64,
    pub weight_decay: f64,
    pub epsilon: EpsilonPolicy,
    /// IPOT outer iterations.
    pub ipot_iters: usize,
    /// Cap on scaling sweeps per IPOT outer iteration.
    pub ipot_inner: usize,
    pub ipot_tol: f64,
    pub warmup: bool,
    pub loss: AdaptLoss,
    pub mask: AdaptMask,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed for the particle draws.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            window: 20,
            particles: 64,
            inner_iters: 2,
            lr: 1.8e-3,
            weight_decay: 1e-3,
            epsilon: EpsilonPolicy::default(),
            ipot_iters: 50,
            ipot_inner: 1000,
            ipot_tol: 1e-6,
            warmup: true,
            loss: AdaptLoss::Ot,
            mask: AdaptMask::MeasurementOnly,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if self.particles < 2 {
            return bad("particles must be >= 2");
        }
        if self.inner_iters < 1 {
            return bad("inner iterations must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.ipot_iters < 1 || self.ipot_inner < 1 {
            return bad("IPOT iterations must be >= 1");
        }
        Ok(())
    }

    fn ipot_options(&self) -> IpotOptions {
        IpotOptions {
            outer_iters: self.ipot_iters,
            inner_iters: self.ipot_inner,
            tol: self.ipot_tol,
            ..IpotOptions::default()
        }
    }
}

/// Adam moments with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            step: 0,
        }
    }

    /// One update of the unmasked coordinates of `params`.
    pub fn apply(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        cfg: &AdaptConfig,
        active: &[bool],
    ) {
        self.step += 1;
        let s = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(s);
        let c2 = 1.0 - cfg.beta2.powi(s);
        for k in 0..params.len() {
            if !active[k] {
                continue;
            }
            let g = grad[k];
            self.first[k] = cfg.beta1 * self.first[k] + (1.0 - cfg.beta1) * g;
            self.second[k] = cfg.beta2 * self.second[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.first[k] / c1;
            let v_hat = self.second[k] / c2;
            params[k] -= lr * cfg.weight_decay * params[k];
            params[k] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Linear warm-up `min(η, t·η/W)`.
pub fn warmup_lr(t: usize, window: usize, lr: f64) -> f64 {
    (lr * t as f64 / window as f64).min(lr)
}

/// Source cloud `z_i = mean + chol(S) ε_i` with uniform weights.
pub fn build_source(pm: &PredictiveMeasurement, draws: &[DVector<f64>]) -> Result<DiscreteMeasure> {
    let points = draws.iter().map(|e| &pm.mean + &pm.chol_s * e).collect();
    DiscreteMeasure::uniform(points)
}

/// Target cloud `y + e_j` over every stored residual, uniform weights.
pub fn build_target(y: &DVector<f64>, window: &ResidualWindow) -> Result<DiscreteMeasure> {
    if window.is_empty() {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    DiscreteMeasure::uniform(window.iter().map(|e| y + e).collect())
}

/// Loss, gradient and the transport solve behind them.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    /// `∂L/∂θ` over `[log_q; log_r]`.
    pub grad: Vec<f64>,
    pub plan: TransportPlan,
    pub epsilon: f64,
}

/// Transport loss between the sampled predictive measurement and the target cloud, and its
/// gradient in `θ`.
///
/// `prev` is the previous posterior; it and the draws are held fixed, so `θ` enters only
/// through `Q̂` in the one-step prediction and through `R̂`. The plan is treated as constant
/// when differentiating.
#[allow(clippy::too_many_arguments)]
pub fn theta_gradient(
    theta: &NoiseParams,
    prev: &StateEstimate,
    control: f64,
    y: &DVector<f64>,
    window: &ResidualWindow,
    cfg: &AdaptConfig,
    draws: &[DVector<f64>],
    spec: &SsmSpec,
) -> Result<GradientReport> {
    let prior = ekf::predict(prev, theta, spec, control)?;
    let pm = ekf::predictive_measurement(&prior, theta, spec)?;
    let source = build_source(&pm, draws)?;
    let target = match cfg.loss {
        AdaptLoss::Ot => build_target(y, window)?,
        AdaptLoss::Pointwise => DiscreteMeasure::uniform(vec![y.clone()])?,
    };
    let cost = ot::cost_matrix(&source.points, &target.points)?;
    let epsilon = cfg.epsilon.resolve(&cost);
    let plan = ot::ipot(
        &source.weights,
        &target.weights,
        &cost,
        epsilon,
        cfg.ipot_options(),
    )?;
    let (loss, point_grads) = ot::ot_loss_and_point_grad(&plan, &source.points, &target.points);

    // ∂L/∂chol(S) = Σ_i g_i ε_iᵀ, restricted to the lower triangle.
    let m = pm.mean.len();
    let mut dl = DMatrix::<f64>::zeros(m, m);
    for (g, e) in point_grads.iter().zip(draws) {
        dl += g * e.transpose();
    }
    let n = theta.log_q.len();
    let q_var = theta.q_var();
    let r_var = theta.r_var();
    let mut grad = Vec::with_capacity(n + m);
    for k in 0..n {
        let hk = pm.h.column(k);
        let ds = (hk * hk.transpose()) * (2.0 * q_var[k]);
        grad.push(chol_directional(&pm.chol_s, &ds, &dl)?);
    }
    for k in 0..m {
        let mut ds = DMatrix::zeros(m, m);
        ds[(k, k)] = 2.0 * r_var[k];
        grad.push(chol_directional(&pm.chol_s, &ds, &dl)?);
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    Ok(GradientReport {
        loss,
        grad,
        plan,
        epsilon,
    })
}

/// `⟨G, dL⟩` where `dL = L Φ(L⁻¹ dS L⁻ᵀ)` is the Cholesky differential and `Φ` keeps the
/// strict lower triangle plus half the diagonal.
fn chol_directional(l: &DMatrix<f64>, ds: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let singular = || Error::InvalidInput("singular Cholesky factor".into());
    let x = l.solve_lower_triangular(ds).ok_or_else(singular)?;
    let x = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(singular)?;
    let m = x.nrows();
    let phi = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => x[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * x[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    });
    Ok((l * phi).component_mul(g).sum())
}

/// Draws `count` standard-normal vectors of length `dim`, particle by particle.
pub fn standard_normal_draws<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    dim: usize,
) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_fn(dim, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// Per-step record of what the adaptation did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub skipped: bool,
    pub clamped: bool,
    pub q_var: Vec<f64>,
    pub r_var: Vec<f64>,
}

/// `K` parameter updates for time step `t` (1-based).
///
/// With an empty window nothing is updated and the step is marked as skipped.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step<R: Rng + ?Sized>(
    theta: &NoiseParams,
    opt: &mut OptimizerState,
    prev: &StateEstimate,
    control: f64,
    y: &DVector<f64>,
    window: &ResidualWindow,
    cfg: &AdaptConfig,
    spec: &SsmSpec,
    t: usize,
    rng: &mut R,
) -> Result<(NoiseParams, StepDiagnostics)> {
    cfg.validate()?;
    let lr = if cfg.warmup {
        warmup_lr(t.max(1), cfg.window, cfg.lr)
    } else {
        cfg.lr
    };
    let mut diag = StepDiagnostics {
        t,
        lr,
        losses: Vec::with_capacity(cfg.inner_iters),
        skipped: false,
        clamped: false,
        q_var: Vec::new(),
        r_var: Vec::new(),
    };
    let n = theta.log_q.len();
    let mut current = theta.clone();
    if window.is_empty() {
        diag.skipped = true;
    } else {
        let active = cfg.mask.flags(n, theta.log_r.len());
        let m = spec.meas_dim();
        for _ in 0..cfg.inner_iters {
            let draws = standard_normal_draws(rng, cfg.particles, m);
            let report = theta_gradient(&current, prev, control, y, window, cfg, &draws, spec)?;
            diag.losses.push(report.loss);
            let mut flat = current.to_vec();
            opt.apply(&mut flat, &report.grad, lr, cfg, &active);
            for v in flat.iter_mut() {
                if v.abs() > LOG_STD_LIMIT {
                    *v = v.clamp(-LOG_STD_LIMIT, LOG_STD_LIMIT);
                    diag.clamped = true;
                }
            }
            current = NoiseParams::from_flat(n, &flat);
        }
    }
    diag.q_var = current.q_var().iter().copied().collect();
    diag.r_var = current.r_var().iter().copied().collect();
    Ok((current, diag))
}

/// Output of [`run_otak_filter`].
#[derive(Debug, Clone)]
pub struct OtakRun {
    pub estimates: Vec<StateEstimate>,
    /// Parameters used for the update at each step.
    pub thetas: Vec<NoiseParams>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Filters `traj` while adapting `θ` online.
///
/// Each step inserts the new innovation into the window once, runs [`adapt_step`] (from
/// `t = 2` on), then performs the EKF predict/update with the adapted parameters.
pub fn run_otak_filter(
    traj: &Trajectory,
    theta0: &NoiseParams,
    cfg: &AdaptConfig,
    x0: &DVector<f64>,
    cov0: &DMatrix<f64>,
) -> Result<OtakRun> {
    cfg.validate()?;
    if traj.len() < 2 {
        return Err(Error::InvalidInput(
            "adaptive filtering needs at least two steps".into(),
        ));
    }
    let spec = &traj.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut window = ResidualWindow::new(cfg.window)?;
    let mut opt = OptimizerState::new(theta0.dim());
    let mut theta = theta0.clone();
    let mut est = StateEstimate::new(x0.clone(), cov0.clone())?;
    let mut out = OtakRun {
        estimates: Vec::with_capacity(traj.len()),
        thetas: Vec::with_capacity(traj.len()),
        diagnostics: Vec::with_capacity(traj.len()),
    };
    for (k, y) in traj.measurements.iter().enumerate() {
        let t = k + 1;
        let u = traj.control(k);
        let predicted = spec.transition(&est.mean, u)?;
        window.push(y - spec.measure(&predicted)?);
        if t >= 2 {
            let (next, diag) = adapt_step(
                &theta, &mut opt, &est, u, y, &window, cfg, spec, t, &mut rng,
            )?;
            theta = next;
            out.diagnostics.push(diag);
        } else {
            out.diagnostics.push(StepDiagnostics {
                t,
                lr: 0.0,
                losses: Vec::new(),
                skipped: true,
                clamped: false,
                q_var: theta.q_var().iter().copied().collect(),
                r_var: theta.r_var().iter().copied().collect(),
            });
        }
        let prior = ekf::predict(&est, &theta, spec, u)?;
        let pm = ekf::predictive_measurement(&prior, &theta, spec)?;
        est = ekf::update(&prior, &pm, y)?;
        out.estimates.push(est.clone());
        out.thetas.push(theta.clone());
    }
    Ok(out)
}

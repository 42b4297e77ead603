use nalgebra::{DMatrix, DVector};

use super::{
    check_problem, dead_col, dead_row, log_sum_exp, marginal_violation, Stabilization,
    TransportPlan,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpotOptions {
    /// Proximal (outer) iterations.
    pub outer_iters: usize,
    /// Cap on scaling sweeps per outer iteration; sweeps stop early once the row marginals
    /// are within `tol`.
    pub inner_iters: usize,
    /// Early exit once both the marginal violation and the L1 change of the plan fall below this.
    pub tol: f64,
    pub stabilization: Stabilization,
}

impl Default for IpotOptions {
    fn default() -> Self {
        Self {
            outer_iters: 50,
            inner_iters: 1000,
            tol: 1e-6,
            stabilization: Stabilization::Auto,
        }
    }
}

/// Inexact proximal-point OT.
///
/// Starting from the uniform coupling, each outer step forms `Q = G ⊙ π` with
/// `G = exp(-C/ε)`, runs `inner_iters` sweeps of `a ← μ/(Qb)`, `b ← ν/(Qᵀa)` and sets
/// `π ← diag(a) Q diag(b)`. The scaling vector `b` carries over between outer steps. If the
/// iteration budget runs out before the marginals are within `tol`, the plan is rounded onto
/// the feasible set.
pub fn ipot(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: IpotOptions,
) -> Result<TransportPlan> {
    check_problem(mu, nu, cost)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if opts.outer_iters == 0 || opts.inner_iters == 0 {
        return Err(Error::InvalidInput(
            "IPOT needs at least one outer and one inner iteration".into(),
        ));
    }
    let mut plan = match scaling(mu, nu, cost, epsilon, &opts) {
        Ok(plan) => plan,
        Err(Error::KernelUnderflow { .. }) if opts.stabilization == Stabilization::Auto => {
            log_domain(mu, nu, cost, epsilon, &opts)
        }
        Err(e) => return Err(e),
    };
    if plan.marginal_violation(mu, nu) >= opts.tol {
        plan = TransportPlan::from_plan(
            round_to_marginals(&plan.plan, mu, nu),
            cost,
            plan.iterations_used,
            plan.log_domain,
        );
    }
    Ok(plan)
}

/// Projects a nonnegative near-feasible coupling onto the transport polytope: scale rows and
/// then columns down to their marginals, and spread the remaining mass as a rank-one term.
/// The result moves by at most about twice the input's marginal violation in L1.
fn round_to_marginals(plan: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> DMatrix<f64> {
    let mut p = plan.clone();
    for (i, mut row) in p.row_iter_mut().enumerate() {
        let sum = row.sum();
        if sum > mu[i] {
            row *= mu[i] / sum;
        }
    }
    for (j, mut col) in p.column_iter_mut().enumerate() {
        let sum = col.sum();
        if sum > nu[j] {
            col *= nu[j] / sum;
        }
    }
    let err_r = mu - p.column_sum();
    let err_c = nu - p.row_sum().transpose();
    let mass = err_r.sum();
    if mass > 0.0 {
        p += &err_r * err_c.transpose() / mass;
    }
    p
}

fn scaling(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: &IpotOptions,
) -> Result<TransportPlan> {
    let (n, w) = cost.shape();
    if opts.stabilization == Stabilization::Off {
        let g = cost.map(|c| (-c / epsilon).exp());
        if let Some(row) = dead_row(&g) {
            return Err(Error::KernelUnderflow { row, epsilon });
        }
        if let Some(col) = dead_col(&g) {
            return Err(Error::KernelUnderflow { row: col, epsilon });
        }
    }
    // The plan is tracked in log form; each outer step exponentiates `log π − C/ε` after
    // shifting every row by its maximum. `a` absorbs the shift, so the iterates match the
    // textbook recursion while no row of `Q` can underflow entirely.
    let mut log_plan = DMatrix::from_element(n, w, -((n * w) as f64).ln());
    let mut plan = DMatrix::from_element(n, w, 1.0 / (n * w) as f64);
    let mut b = DVector::from_element(w, 1.0 / w as f64);
    let mut q = DMatrix::<f64>::zeros(n, w);
    let scaled = cost / epsilon;
    let mut shift = DVector::<f64>::zeros(n);
    let mut iters = 0;
    for k in 1..=opts.outer_iters {
        iters = k;
        // Storage is column-major, so every pass walks columns.
        log_plan -= &scaled;
        shift.fill(f64::NEG_INFINITY);
        for col in log_plan.column_iter() {
            for (s, x) in shift.iter_mut().zip(col.iter()) {
                *s = s.max(*x);
            }
        }
        for (mut lp, mut qc) in log_plan.column_iter_mut().zip(q.column_iter_mut()) {
            for ((x, qv), s) in lp.iter_mut().zip(qc.iter_mut()).zip(shift.iter()) {
                *x -= s;
                *qv = x.exp();
            }
        }
        let top = b.max();
        b /= top;
        let mut a = DVector::zeros(n);
        for sweep in 0..opts.inner_iters {
            let qb = &q * &b;
            // After a `b` update the columns are exact; stop once the rows are too.
            if sweep > 0 && row_violation(&a, &qb, mu) < opts.tol {
                break;
            }
            a = mu.component_div(&qb);
            b = nu.component_div(&q.tr_mul(&a));
        }
        if let Some(row) = a.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::KernelUnderflow { row, epsilon });
        }
        if b.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::KernelUnderflow { row: 0, epsilon });
        }
        let (la, lb) = (a.map(f64::ln), b.map(f64::ln));
        let mut change = 0.0;
        for (j, ((mut lp, mut pc), qc)) in log_plan
            .column_iter_mut()
            .zip(plan.column_iter_mut())
            .zip(q.column_iter())
            .enumerate()
        {
            for i in 0..n {
                lp[i] += la[i] + lb[j];
                let next = a[i] * qc[i] * b[j];
                change += (next - pc[i]).abs();
                pc[i] = next;
            }
        }
        if change < opts.tol && marginal_violation(&plan, mu, nu) < opts.tol {
            break;
        }
    }
    Ok(TransportPlan::from_plan(plan, cost, iters, false))
}

/// `max_i |a_i (Qb)_i − μ_i|`.
fn row_violation(a: &DVector<f64>, qb: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    a.iter()
        .zip(qb.iter())
        .zip(mu.iter())
        .map(|((a, q), m)| (a * q - m).abs())
        .fold(0.0, f64::max)
}

fn log_domain(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: &IpotOptions,
) -> TransportPlan {
    let (n, w) = cost.shape();
    let log_mu = mu.map(f64::ln);
    let log_nu = nu.map(f64::ln);
    let mut log_plan = DMatrix::from_element(n, w, -((n * w) as f64).ln());
    let mut beta = DVector::from_element(w, -(w as f64).ln());
    let mut alpha = DVector::<f64>::zeros(n);
    let mut iters = 0;
    for k in 1..=opts.outer_iters {
        iters = k;
        let log_q = DMatrix::from_fn(n, w, |i, j| log_plan[(i, j)] - cost[(i, j)] / epsilon);
        for sweep in 0..opts.inner_iters {
            let row_lse = DVector::from_fn(n, |i, _| {
                log_sum_exp((0..w).map(|j| log_q[(i, j)] + beta[j]))
            });
            if sweep > 0 {
                let viol = (0..n)
                    .map(|i| ((alpha[i] + row_lse[i]).exp() - mu[i]).abs())
                    .fold(0.0, f64::max);
                if viol < opts.tol {
                    break;
                }
            }
            for i in 0..n {
                alpha[i] = log_mu[i] - row_lse[i];
            }
            for j in 0..w {
                beta[j] = log_nu[j] - log_sum_exp((0..n).map(|i| log_q[(i, j)] + alpha[i]));
            }
        }
        let next = DMatrix::from_fn(n, w, |i, j| alpha[i] + log_q[(i, j)] + beta[j]);
        let change: f64 = next
            .iter()
            .zip(log_plan.iter())
            .map(|(x, y)| (x.exp() - y.exp()).abs())
            .sum();
        log_plan = next;
        if change < opts.tol && marginal_violation(&log_plan.map(f64::exp), mu, nu) < opts.tol {
            break;
        }
    }
    TransportPlan::from_plan(log_plan.map(f64::exp), cost, iters, true)
}

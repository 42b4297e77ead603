use nalgebra::{DMatrix, DVector};

use super::{
    check_problem, dead_col, dead_row, log_sum_exp, marginal_violation, Stabilization,
    TransportPlan,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub max_iter: usize,
    /// Stop once every marginal is matched within this tolerance.
    pub tol: f64,
    pub stabilization: Stabilization,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-9,
            stabilization: Stabilization::Auto,
        }
    }
}

/// Entropic OT by alternating scaling on `K = exp(-C/ε)`.
///
/// The reported objective is `Σ π C`; the entropy term is not included.
pub fn sinkhorn(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: SinkhornOptions,
) -> Result<TransportPlan> {
    check_problem(mu, nu, cost)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    match scaling(mu, nu, cost, epsilon, &opts) {
        Ok(plan) => Ok(plan),
        Err(Error::KernelUnderflow { .. }) if opts.stabilization == Stabilization::Auto => {
            Ok(log_domain(mu, nu, cost, epsilon, &opts))
        }
        Err(e) => Err(e),
    }
}

fn scaling(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    let k = cost.map(|c| (-c / epsilon).exp());
    if let Some(row) = dead_row(&k) {
        return Err(Error::KernelUnderflow { row, epsilon });
    }
    if let Some(col) = dead_col(&k) {
        // Report the column through the row slot of its transpose.
        return Err(Error::KernelUnderflow { row: col, epsilon });
    }
    let mut u = DVector::from_element(mu.len(), 1.0);
    let mut v = DVector::from_element(nu.len(), 1.0);
    let mut iters = 0;
    for it in 1..=opts.max_iter {
        iters = it;
        let kv = &k * &v;
        u = mu.component_div(&kv);
        let ktu = k.tr_mul(&u);
        v = nu.component_div(&ktu);
        if let Some(i) = u.iter().position(|x| !x.is_finite()) {
            return Err(Error::KernelUnderflow { row: i, epsilon });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::KernelUnderflow { row: 0, epsilon });
        }
        // Columns are exact after the v-update; only rows can be off.
        let rows = u.component_mul(&(&k * &v));
        if (rows - mu).amax() < opts.tol {
            break;
        }
    }
    let plan = DMatrix::from_fn(mu.len(), nu.len(), |i, j| u[i] * k[(i, j)] * v[j]);
    Ok(TransportPlan::from_plan(plan, cost, iters, false))
}

fn log_domain(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> TransportPlan {
    let (n, w) = cost.shape();
    let log_mu = mu.map(f64::ln);
    let log_nu = nu.map(f64::ln);
    let mut f = DVector::zeros(n);
    let mut g = DVector::<f64>::zeros(w);
    let plan_of = |f: &DVector<f64>, g: &DVector<f64>| {
        DMatrix::from_fn(n, w, |i, j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp())
    };
    let mut iters = 0;
    for it in 1..=opts.max_iter {
        iters = it;
        for i in 0..n {
            f[i] = epsilon
                * (log_mu[i] - log_sum_exp((0..w).map(|j| (g[j] - cost[(i, j)]) / epsilon)));
        }
        for j in 0..w {
            g[j] = epsilon
                * (log_nu[j] - log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / epsilon)));
        }
        if marginal_violation(&plan_of(&f, &g), mu, nu) < opts.tol {
            break;
        }
    }
    TransportPlan::from_plan(plan_of(&f, &g), cost, iters, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{cost_matrix, lp_exact};

    fn pts(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| DVector::from_element(1, *x)).collect()
    }

    fn uniform(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0 / n as f64)
    }

    #[test]
    fn self_transport_is_cheap() {
        let p: Vec<DVector<f64>> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
            .iter()
            .map(|x| DVector::from_column_slice(x))
            .collect();
        let c = cost_matrix(&p, &p).unwrap();
        let plan = sinkhorn(&uniform(3), &uniform(3), &c, 0.01, Default::default()).unwrap();
        assert!(plan.objective < 1e-3, "{}", plan.objective);
    }

    #[test]
    fn single_points_are_forced() {
        let c = cost_matrix(&pts(&[0.0]), &pts(&[3.0])).unwrap();
        let plan = sinkhorn(&uniform(1), &uniform(1), &c, 0.1, Default::default()).unwrap();
        assert!((plan.plan[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((plan.objective - 4.5).abs() < 1e-12);
    }

    #[test]
    fn entropic_objective_bounds_exact() {
        let src = pts(&[0.1, 0.9, -0.4, 1.7]);
        let tgt = pts(&[0.0, 1.2, 2.5]);
        let c = cost_matrix(&src, &tgt).unwrap();
        let (mu, nu) = (uniform(4), uniform(3));
        let s = sinkhorn(&mu, &nu, &c, 0.05, Default::default()).unwrap();
        let e = lp_exact(&mu, &nu, &c).unwrap();
        assert!(s.objective >= e.objective - 1e-9);
        assert!(s.marginal_violation(&mu, &nu) < 1e-6);
    }

    #[test]
    fn underflow_is_reported_or_stabilized() {
        let c = cost_matrix(&pts(&[0.0, 100.0]), &pts(&[2.0, 102.0])).unwrap();
        let opts = SinkhornOptions {
            stabilization: Stabilization::Off,
            ..Default::default()
        };
        let err = sinkhorn(&uniform(2), &uniform(2), &c, 1e-3, opts).unwrap_err();
        assert_eq!(
            err,
            Error::KernelUnderflow {
                row: 0,
                epsilon: 1e-3
            }
        );
        let plan = sinkhorn(&uniform(2), &uniform(2), &c, 1e-3, Default::default()).unwrap();
        assert!(plan.log_domain);
        assert!(plan.marginal_violation(&uniform(2), &uniform(2)) < 1e-6);
        assert!((plan.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let c = DMatrix::zeros(1, 1);
        assert!(sinkhorn(&uniform(1), &uniform(1), &c, 0.0, Default::default()).is_err());
    }
}

//! Discrete optimal transport.
//!
//! Entropic solvers ([`sinkhorn`], [`ipot`]) work on a dense cost matrix between two
//! weighted point clouds. [`lp_exact`] solves the unregularized problem exactly and is used
//! as an oracle; [`gaussian_w2_sq`] is the closed-form squared 2-Wasserstein distance
//! between Gaussians.

mod exact;
mod gaussian;
mod ipot;
mod sinkhorn;

pub use exact::{lp_exact, LP_CELL_LIMIT};
pub use gaussian::gaussian_w2_sq;
pub use ipot::{ipot, IpotOptions};
pub use sinkhorn::{sinkhorn, SinkhornOptions};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted point cloud `Σ_i w_i δ_{p_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<DVector<f64>>,
    pub weights: DVector<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<DVector<f64>>, weights: DVector<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
                context: "measure weights",
            });
        }
        if points.is_empty() {
            return Err(Error::InvalidInput("empty measure".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidInput("points of mixed dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("negative or NaN weight".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() >= 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}")));
        }
        Ok(Self { points, weights })
    }

    /// Equal mass `1/N` on every point.
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty measure".into()));
        }
        let w = DVector::from_element(n, 1.0 / n as f64);
        Self::new(points, w)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// A coupling together with the cost it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: DMatrix<f64>,
    pub cost: DMatrix<f64>,
    /// `Σ π_ij C_ij` (no entropy term).
    pub objective: f64,
    pub iterations_used: usize,
    /// Whether the solver had to switch to log-domain updates.
    pub log_domain: bool,
}

impl TransportPlan {
    pub(crate) fn from_plan(
        plan: DMatrix<f64>,
        cost: &DMatrix<f64>,
        iterations_used: usize,
        log_domain: bool,
    ) -> Self {
        let objective = plan.component_mul(cost).sum();
        Self {
            plan,
            cost: cost.clone(),
            objective,
            iterations_used,
            log_domain,
        }
    }

    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_violation(&self, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
        marginal_violation(&self.plan, mu, nu)
    }
}

pub(crate) fn marginal_violation(plan: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let rows = plan.column_sum();
    let cols = plan.row_sum();
    let r = (rows - mu).amax();
    let c = (cols.transpose() - nu).amax();
    r.max(c)
}

/// Whether the solvers may fall back to log-domain iterations when the kernel underflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilization {
    #[default]
    Auto,
    Off,
}

/// How the entropic regularization strength is chosen for each solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// `max(scale · median(C), floor)`.
    MedianScaled {
        scale: f64,
        floor: f64,
    },
    Fixed {
        value: f64,
    },
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        EpsilonPolicy::MedianScaled {
            scale: 0.2,
            floor: 1e-6,
        }
    }
}

impl EpsilonPolicy {
    pub fn resolve(&self, cost: &DMatrix<f64>) -> f64 {
        match *self {
            EpsilonPolicy::Fixed { value } => value,
            EpsilonPolicy::MedianScaled { scale, floor } => {
                let mut v: Vec<f64> = cost.iter().copied().collect();
                if v.is_empty() {
                    return floor;
                }
                let mid = v.len() / 2;
                let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
                let mut median = *m;
                if v.len().is_multiple_of(2) {
                    let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    median = 0.5 * (median + lower);
                }
                (scale * median).max(floor)
            }
        }
    }
}

/// `C_ij = ½ ‖src_i − tgt_j‖²`.
pub fn cost_matrix(src: &[DVector<f64>], tgt: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if let (Some(a), Some(b)) = (src.first(), tgt.first()) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
                context: "target point dimension",
            });
        }
    }
    Ok(DMatrix::from_fn(src.len(), tgt.len(), |i, j| {
        0.5 * (&src[i] - &tgt[j]).norm_squared()
    }))
}

/// `Σ π_ij C_ij` and its gradient in each source point with the plan held fixed:
/// `∂/∂z_i = Σ_j π_ij (z_i − z̃_j)`.
pub fn ot_loss_and_point_grad(
    plan: &TransportPlan,
    src: &[DVector<f64>],
    tgt: &[DVector<f64>],
) -> (f64, Vec<DVector<f64>>) {
    let p = &plan.plan;
    let loss = p.component_mul(&plan.cost).sum();
    let grads = src
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut g = z * p.row(i).sum();
            for (j, t) in tgt.iter().enumerate() {
                g.axpy(-p[(i, j)], t, 1.0);
            }
            g
        })
        .collect();
    (loss, grads)
}

pub(crate) fn check_problem(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
) -> Result<()> {
    if cost.nrows() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: cost.nrows(),
            context: "cost rows",
        });
    }
    if cost.ncols() != nu.len() {
        return Err(Error::DimensionMismatch {
            expected: nu.len(),
            got: cost.ncols(),
            context: "cost columns",
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("non-finite cost entry".into()));
    }
    Ok(())
}

/// `log Σ_k exp(x_k)`; returns `-inf` when every term is `-inf`.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the first row of `k` with no positive entry.
pub(crate) fn dead_row(k: &DMatrix<f64>) -> Option<usize> {
    (0..k.nrows()).find(|&i| k.row(i).iter().all(|&v| !(v > 0.0)))
}

pub(crate) fn dead_col(k: &DMatrix<f64>) -> Option<usize> {
    (0..k.ncols()).find(|&j| k.column(j).iter().all(|&v| !(v > 0.0)))
}

//! Exact discrete OT by successive shortest augmenting paths on the bipartite transport graph.

use nalgebra::{DMatrix, DVector};

use super::{check_problem, TransportPlan};
use crate::error::{Error, Result};

/// Largest `N · W` accepted by [`lp_exact`].
pub const LP_CELL_LIMIT: usize = 10_000;

const MASS_EPS: f64 = 1e-15;

/// Solves `min_{π ∈ Π(μ, ν)} Σ π_ij C_ij` exactly (up to floating-point rounding).
///
/// Min-cost flow from sources to sinks: each round runs Dijkstra on reduced costs from every
/// source with remaining supply, augments along the cheapest path to a sink with remaining
/// demand, then updates node potentials.
pub fn lp_exact(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cost: &DMatrix<f64>,
) -> Result<TransportPlan> {
    check_problem(mu, nu, cost)?;
    let (n, w) = cost.shape();
    if n * w > LP_CELL_LIMIT {
        return Err(Error::SizeLimit {
            cells: n * w,
            limit: LP_CELL_LIMIT,
        });
    }
    let mut supply = mu.clone();
    let mut demand = nu.clone();
    let mut flow = DMatrix::<f64>::zeros(n, w);
    // Potentials: sources 0..n, sinks n..n+w.
    let mut pot = vec![0.0_f64; n + w];
    let total = mu.sum().min(nu.sum());
    let mut shipped = 0.0;
    let mut rounds = 0;
    let max_rounds = 4 * (n + w) * (n + w) + 16;

    while total - shipped > 1e-13 && rounds < max_rounds {
        rounds += 1;
        let nodes = n + w;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                // Forward edges i -> j, unbounded capacity.
                for j in 0..w {
                    let v = n + j;
                    let rc = (cost[(u, j)] + pot[u] - pot[v]).max(0.0);
                    if dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        prev[v] = u;
                    }
                }
            } else {
                // Backward edges j -> i where flow can be undone.
                let j = u - n;
                for i in 0..n {
                    if flow[(i, j)] > MASS_EPS {
                        let rc = (-cost[(i, j)] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let sink = (0..w)
            .filter(|&j| demand[j] > MASS_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(sink) = sink else { break };
        let target = n + sink;
        let d_target = dist[target];

        // Bottleneck along the path.
        let mut amount = demand[sink];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                amount = amount.min(flow[(v, u - n)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);

        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[(u, v - n)] += amount;
            } else {
                let f = &mut flow[(v, u - n)];
                *f -= amount;
                if *f < MASS_EPS {
                    *f = 0.0;
                }
            }
            v = u;
        }
        supply[v] -= amount;
        demand[sink] -= amount;
        shipped += amount;

        for x in 0..nodes {
            pot[x] += dist[x].min(d_target);
        }
    }
    Ok(TransportPlan::from_plan(flow, cost, rounds, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::cost_matrix;

    fn uniform(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0 / n as f64)
    }

    #[test]
    fn one_by_one() {
        let c = DMatrix::from_element(1, 1, 3.0);
        let p = lp_exact(&uniform(1), &uniform(1), &c).unwrap();
        assert_eq!(p.plan[(0, 0)], 1.0);
        assert_eq!(p.objective, 3.0);
    }

    #[test]
    fn two_by_two_diagonal() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = lp_exact(&uniform(2), &uniform(2), &c).unwrap();
        assert_eq!(p.objective, 0.0);
        assert_eq!(p.plan, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn one_dimensional_equals_sorted_matching() {
        // Oracle: for equal-size uniform 1D measures the optimal coupling pairs sorted points.
        let a = [0.7, -1.3, 2.4, 0.1, 1.9, -0.2];
        let b = [1.1, 0.0, -2.0, 0.4, 3.3, 0.9];
        let pa: Vec<_> = a.iter().map(|x| DVector::from_element(1, *x)).collect();
        let pb: Vec<_> = b.iter().map(|x| DVector::from_element(1, *x)).collect();
        let c = cost_matrix(&pa, &pb).unwrap();
        let p = lp_exact(&uniform(6), &uniform(6), &c).unwrap();
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let sorted: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| 0.5 * (x - y).powi(2))
            .sum::<f64>()
            / 6.0;
        assert!(
            (p.objective - sorted).abs() < 1e-12,
            "{} vs {sorted}",
            p.objective
        );
    }

    #[test]
    fn unequal_sizes_respect_marginals() {
        let mu = DVector::from_vec(vec![0.5, 0.2, 0.3]);
        let nu = DVector::from_vec(vec![0.25, 0.25, 0.25, 0.25]);
        let c = DMatrix::from_fn(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * j as f64);
        let p = lp_exact(&mu, &nu, &c).unwrap();
        assert!(p.marginal_violation(&mu, &nu) < 1e-12);
        assert!(p.plan.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn size_limit() {
        let c = DMatrix::zeros(101, 100);
        assert!(matches!(
            lp_exact(&uniform(101), &uniform(100), &c),
            Err(Error::SizeLimit { .. })
        ));
    }
}

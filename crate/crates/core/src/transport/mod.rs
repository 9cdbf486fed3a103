//! Wasserstein distances between uniformly weighted point clouds.

mod assignment;
mod matrix;
mod simplex;
mod sinkhorn;

pub use assignment::solve_assignment;
pub use matrix::{distance_matrix, DistanceMatrix, Pairwise, Solver};
pub use simplex::solve_transportation;
pub use sinkhorn::{sinkhorn_log, SinkhornOutput, SinkhornParams};

pub(crate) use sinkhorn::log_sum_exp;

use crate::error::{Error, Result};
use crate::preprocess::PointCloud;

/// Ground costs `d(x_i, y_j)^p` under the Euclidean metric, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    p: f64,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, p: f64, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CostMatrix { rows, cols, p, data }
    }

    /// Euclidean ground cost raised to `p` between two point sets.
    pub fn euclidean(a: &[[f64; 3]], b: &[[f64; 3]], p: f64) -> Self {
        CostMatrix::from_fn(a.len(), b.len(), p, |i, j| ground_cost(&a[i], &b[j], p))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// `‖x − y‖^p`. Squared distances skip the square root for `p = 2`.
#[inline]
pub fn ground_cost(x: &[f64; 3], y: &[f64; 3], p: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if p == 2.0 {
        sq
    } else if p == 1.0 {
        sq.sqrt()
    } else {
        sq.sqrt().powf(p)
    }
}

/// A coupling between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    mass: Vec<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    pub fn new(rows: usize, cols: usize, mass: Vec<f64>, row_marginal: Vec<f64>, col_marginal: Vec<f64>) -> Self {
        assert_eq!(mass.len(), rows * cols);
        TransportPlan {
            rows,
            cols,
            mass,
            row_marginal,
            col_marginal,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.mass[i * self.cols..(i + 1) * self.cols].iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, acc) in s.iter_mut().enumerate() {
                *acc += self.get(i, j);
            }
        }
        s
    }

    /// Largest absolute deviation of either marginal from its prescription.
    pub fn max_marginal_error(&self) -> f64 {
        let r = self.row_sums().iter().zip(&self.row_marginal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let c = self.col_sums().iter().zip(&self.col_marginal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        r.max(c)
    }

    /// `Σ λ_ij c_ij`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.mass.iter().zip(cost.as_slice()).map(|(m, c)| m * c).sum()
    }
}

/// Exact solver selection; `Auto` uses assignment when sizes match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExactMethod {
    #[default]
    Auto,
    NetworkSimplex,
    Assignment,
}

fn check_clouds(a: &PointCloud, b: &PointCloud, p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Argument(format!("exponent p must be >= 1, got {p}")));
    }
    for c in [a, b] {
        if c.is_empty() {
            return Err(Error::Size(format!("point cloud {} is empty", c.city_id)));
        }
        if c.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("point cloud {} has non-finite coordinates", c.city_id)));
        }
    }
    Ok(())
}

/// Exact `W_p` between uniform clouds with an optimal vertex plan.
pub fn wasserstein_exact(a: &PointCloud, b: &PointCloud, p: f64) -> Result<(f64, TransportPlan)> {
    wasserstein_exact_with(a, b, p, ExactMethod::Auto)
}

pub fn wasserstein_exact_with(
    a: &PointCloud,
    b: &PointCloud,
    p: f64,
    method: ExactMethod,
) -> Result<(f64, TransportPlan)> {
    check_clouds(a, b, p)?;
    let cost = CostMatrix::euclidean(&a.points, &b.points, p);
    let (n, m) = (a.len(), b.len());
    let row_marginal = vec![1.0 / n as f64; n];
    let col_marginal = vec![1.0 / m as f64; m];
    let use_assignment = match method {
        ExactMethod::Auto => n == m,
        ExactMethod::Assignment => {
            if n != m {
                return Err(Error::Argument(format!("assignment needs equal sizes, got {n} and {m}")));
            }
            true
        }
        ExactMethod::NetworkSimplex => false,
    };
    let mut mass = vec![0.0; n * m];
    let total = if use_assignment {
        let perm = solve_assignment(n, cost.as_slice());
        let w = 1.0 / n as f64;
        let mut s = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            mass[i * m + j] = w;
            s += cost.get(i, j);
        }
        s / n as f64
    } else {
        // Integer masses: each source ships m units, each sink receives n.
        let flow = solve_transportation(&vec![m as i64; n], &vec![n as i64; m], cost.as_slice())?;
        let scale = (n * m) as f64;
        for (dst, &f) in mass.iter_mut().zip(&flow) {
            *dst = f as f64 / scale;
        }
        flow.iter().zip(cost.as_slice()).map(|(&f, &c)| f as f64 * c).sum::<f64>() / scale
    };
    let plan = TransportPlan::new(n, m, mass, row_marginal, col_marginal);
    Ok((cost_to_distance(total, p), plan))
}

#[inline]
pub(crate) fn cost_to_distance(total: f64, p: f64) -> f64 {
    let total = total.max(0.0);
    if p == 1.0 {
        total
    } else if p == 2.0 {
        total.sqrt()
    } else {
        total.powf(1.0 / p)
    }
}

/// Result of an entropic solve; `distance` uses the sharp transport cost of
/// the regularized plan (no entropy term).
#[derive(Debug, Clone)]
pub struct SinkhornDistance {
    pub distance: f64,
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
}

pub fn wasserstein_sinkhorn(a: &PointCloud, b: &PointCloud, p: f64, params: &SinkhornParams) -> Result<SinkhornDistance> {
    check_clouds(a, b, p)?;
    if !(params.epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {}", params.epsilon)));
    }
    let cost = CostMatrix::euclidean(&a.points, &b.points, p);
    let wa = vec![1.0 / a.len() as f64; a.len()];
    let wb = vec![1.0 / b.len() as f64; b.len()];
    let out = sinkhorn_log(&cost, &wa, &wb, params);
    Ok(SinkhornDistance {
        distance: cost_to_distance(out.plan.cost(&cost), p),
        plan: out.plan,
        converged: out.converged,
        iterations: out.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new("c", pts.to_vec())
    }

    fn line(xs: &[f64]) -> PointCloud {
        cloud(&xs.iter().map(|&x| [x, 0.0, 0.0]).collect::<Vec<_>>())
    }

    #[test]
    fn identical_clouds_are_at_zero() {
        let a = cloud(&[[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.4]]);
        assert_eq!(wasserstein_exact(&a, &a, 2.0).unwrap().0, 0.0);
    }

    #[test]
    fn diracs_are_at_their_distance() {
        let (d, plan) = wasserstein_exact(&line(&[0.0]), &line(&[1.0]), 2.0).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(plan.get(0, 0), 1.0);
    }

    #[test]
    fn two_points_against_double_point() {
        // enumerate both assignments of {0, 1} onto {0.5, 0.5}: each costs 0.5 in total
        let a = line(&[0.0, 1.0]);
        let b = line(&[0.5, 0.5]);
        let (d1, _) = wasserstein_exact(&a, &b, 1.0).unwrap();
        let (d2, _) = wasserstein_exact(&a, &b, 2.0).unwrap();
        assert!((d1 - 0.5).abs() < 1e-15);
        assert!((d2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simplex_and_assignment_agree() {
        let a = line(&[0.1, 0.7, 0.3, 0.95]);
        let b = line(&[0.2, 0.25, 0.8, 0.6]);
        for p in [1.0, 1.5, 2.0] {
            let (x, _) = wasserstein_exact_with(&a, &b, p, ExactMethod::Assignment).unwrap();
            let (y, _) = wasserstein_exact_with(&a, &b, p, ExactMethod::NetworkSimplex).unwrap();
            assert!((x - y).abs() < 1e-9, "p={p}: {x} vs {y}");
        }
    }

    #[test]
    fn unequal_sizes_use_simplex() {
        let a = line(&[0.0, 1.0]);
        let b = line(&[0.0, 0.5, 1.0]);
        let (d, plan) = wasserstein_exact(&a, &b, 1.0).unwrap();
        // 1/6 of mass at 0 and 1/6 at 1 travel 0.5 to the middle point
        assert!((d - 1.0 / 6.0).abs() < 1e-12);
        assert!(plan.max_marginal_error() < 1e-12);
    }

    #[test]
    fn errors_on_bad_clouds() {
        let empty = cloud(&[]);
        let ok = line(&[0.5]);
        assert!(matches!(wasserstein_exact(&empty, &ok, 2.0), Err(Error::Size(_))));
        let nan = cloud(&[[f64::NAN, 0.0, 0.0]]);
        assert!(matches!(wasserstein_exact(&nan, &ok, 2.0), Err(Error::Validation(_))));
        assert!(wasserstein_exact(&ok, &ok, 0.5).is_err());
    }

    #[test]
    fn sinkhorn_singletons_are_exact() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        for eps in [1e-3, 0.1, 10.0] {
            let r = wasserstein_sinkhorn(&a, &b, 2.0, &SinkhornParams { epsilon: eps, ..Default::default() }).unwrap();
            assert_eq!(r.distance, 1.0);
            assert!(r.converged);
        }
    }

    #[test]
    fn sinkhorn_identity_shrinks_with_epsilon() {
        let a = cloud(&[[0.1, 0.2, 0.3], [0.5, 0.6, 0.7], [0.9, 0.8, 0.2], [0.3, 0.9, 0.5]]);
        let mut last = f64::INFINITY;
        for eps in [0.5, 0.05, 0.005, 0.0005] {
            let r = wasserstein_sinkhorn(&a, &a, 2.0, &SinkhornParams { epsilon: eps, ..Default::default() }).unwrap();
            assert!(r.distance <= last + 1e-12);
            last = r.distance;
        }
        assert!(last < 1e-6, "{last}");
    }

    #[test]
    fn sinkhorn_rejects_non_positive_epsilon() {
        let a = line(&[0.5]);
        assert!(wasserstein_sinkhorn(&a, &a, 2.0, &SinkhornParams { epsilon: 0.0, ..Default::default() }).is_err());
    }
}

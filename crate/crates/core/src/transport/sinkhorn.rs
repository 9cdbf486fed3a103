//! Log-domain Sinkhorn scaling for entropic optimal transport.

use super::{CostMatrix, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 1e-2,
            max_iter: 100_000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal violation after every iteration at the target epsilon.
    pub violations: Vec<f64>,
}

/// `log Σ_j exp(v_j)`, `-inf` for an empty or all `-inf` input.
pub(crate) fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
}

fn lse_row(cost: &CostMatrix, g: &[f64], i: usize, eps: f64) -> f64 {
    let row = cost.row(i);
    log_sum_exp((0..cost.cols()).map(|j| (g[j] - row[j]) / eps))
}

fn lse_col(cost: &CostMatrix, f: &[f64], j: usize, eps: f64) -> f64 {
    log_sum_exp((0..cost.rows()).map(|i| (f[i] - cost.get(i, j)) / eps))
}

/// One pass over both potentials. `omega = 1` is the plain Sinkhorn step;
/// `omega > 1` over-relaxes, moving past the projection in log space.
fn update(cost: &CostMatrix, log_a: &[f64], log_b: &[f64], eps: f64, omega: f64, pot: &mut Potentials) {
    for i in 0..cost.rows() {
        let f = eps * (log_a[i] - lse_row(cost, &pot.g, i, eps));
        pot.f[i] = (1.0 - omega) * pot.f[i] + omega * f;
    }
    for j in 0..cost.cols() {
        let g = eps * (log_b[j] - lse_col(cost, &pot.f, j, eps));
        pot.g[j] = (1.0 - omega) * pot.g[j] + omega * g;
    }
}

/// Larger of the L1 deviations of the current plan's row and column sums
/// from `a` and `b`.
fn violation(cost: &CostMatrix, a: &[f64], b: &[f64], eps: f64, pot: &Potentials) -> f64 {
    let (n, m) = (cost.rows(), cost.cols());
    let mut cols = vec![0.0; m];
    let mut rows = 0.0;
    for i in 0..n {
        let row = cost.row(i);
        let mut s = 0.0;
        for j in 0..m {
            let x = ((pot.f[i] + pot.g[j] - row[j]) / eps).exp();
            s += x;
            cols[j] += x;
        }
        rows += (s - a[i]).abs();
    }
    let cols: f64 = cols.iter().zip(b).map(|(s, t)| (s - t).abs()).sum();
    rows.max(cols)
}

/// Plain steps taken before the relaxation factor is estimated.
const PROBE_STEPS: usize = 20;
const MAX_OMEGA: f64 = 1.95;
/// Each rung of the epsilon ladder is solved to this violation, or for at
/// most `LADDER_MAX_ITER` steps.
const LADDER_TOL: f64 = 1e-6;
const LADDER_MAX_ITER: usize = 2000;
/// Largest `n + m` for which solves switch to Newton steps.
const NEWTON_MAX_DIM: usize = 400;
/// Cap on the Newton trust radius, in units of epsilon.
const MAX_RADIUS: f64 = 64.0;

struct Problem<'a> {
    cost: &'a CostMatrix,
    a: &'a [f64],
    b: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
}

impl Problem<'_> {
    /// Iterates at `eps` until the violation drops below `tol`; returns
    /// whether it did. Every violation after a step is pushed to `trace`.
    ///
    /// Plain scaling contracts very slowly when the plan is close to a
    /// permutation (small epsilon), so after a few plain steps small problems
    /// switch to Newton steps on the dual, and larger ones to over-relaxation
    /// with `ω = 2 / (1 + √(1 − ρ))` from the observed rate `ρ`. Any
    /// accelerated step that would raise the violation is replaced by a plain
    /// one, so the trace never increases.
    fn solve(&self, eps: f64, tol: f64, max_iter: usize, pot: &mut Potentials, trace: &mut Vec<f64>) -> bool {
        let mut omega = 1.0;
        let mut newton = false;
        let mut radius = eps;
        let start = trace.len();
        for it in 1..=max_iter {
            let prev = trace[start..].last().copied();
            let accepted = match prev {
                Some(current) if newton => self.newton_step(eps, pot, current, &mut radius),
                _ => None,
            };
            let v = match accepted {
                Some(v) => v,
                None => {
                    let saved = (omega > 1.0).then(|| Potentials {
                        f: pot.f.clone(),
                        g: pot.g.clone(),
                    });
                    update(self.cost, &self.log_a, &self.log_b, eps, omega, pot);
                    let mut v = violation(self.cost, self.a, self.b, eps, pot);
                    if let (Some(prev), Some(saved)) = (prev, saved) {
                        if !(v <= prev) {
                            *pot = saved;
                            omega = 1.0 + 0.5 * (omega - 1.0);
                            update(self.cost, &self.log_a, &self.log_b, eps, 1.0, pot);
                            v = violation(self.cost, self.a, self.b, eps, pot);
                        }
                    }
                    v
                }
            };
            trace.push(v);
            if v < tol {
                return true;
            }
            if it == PROBE_STEPS {
                let rho = (v / trace[start + PROBE_STEPS / 2 - 1]).powf(2.0 / PROBE_STEPS as f64);
                if rho.is_finite() && rho < 1.0 {
                    omega = (2.0 / (1.0 + (1.0 - rho).sqrt())).min(MAX_OMEGA);
                }
                newton = self.cost.rows() + self.cost.cols() <= NEWTON_MAX_DIM;
            }
        }
        false
    }

    /// Damped Newton step on the column potentials with the rows kept exact.
    ///
    /// The Jacobian of the column sums is `L / ε`, where `L` is the Laplacian
    /// of the graph with weights `w_jk = Σ_i P_ij P_ik / r_i`. Building `L`
    /// from these weights avoids the cancellation that makes the plain dual
    /// Hessian singular in floating point once the plan is nearly a
    /// permutation. Weakly coupled columns make the raw step far too long,
    /// so `λ I` is added until no potential moves by more than `radius`
    /// (a Levenberg–Marquardt trust region). `radius` grows after an accepted
    /// step and shrinks after a rejected one; `None` means rejected.
    fn newton_step(&self, eps: f64, pot: &mut Potentials, current: f64, radius: &mut f64) -> Option<f64> {
        let (n, m) = (self.cost.rows(), self.cost.cols());
        if m < 2 {
            return None;
        }
        row_update(self.cost, &self.log_a, eps, pot);
        let mut w = vec![0.0; m * m];
        let mut c = vec![0.0; m];
        let mut p = vec![0.0; m];
        for i in 0..n {
            let row = self.cost.row(i);
            for j in 0..m {
                p[j] = ((pot.f[i] + pot.g[j] - row[j]) / eps).exp();
                c[j] += p[j];
            }
            let r: f64 = p.iter().sum();
            if r == 0.0 {
                continue;
            }
            for j in 0..m {
                let s = p[j] / r;
                if s == 0.0 {
                    continue;
                }
                for k in j + 1..m {
                    let v = s * p[k];
                    w[j * m + k] += v;
                    w[k * m + j] += v;
                }
            }
        }
        let rhs: Vec<f64> = (0..m).map(|j| eps * (self.b[j] - c[j])).collect();
        let scale = c.iter().copied().fold(0.0, f64::max);
        let step = std::iter::once(0.0)
            .chain((0..=14).map(|k| scale * 10f64.powi(k - 12)))
            .filter_map(|lambda| solve_grounded_laplacian(w.clone(), rhs.clone(), m, lambda))
            .find(|x| x.iter().all(|v| v.abs() <= *radius))?;
        let mut trial = Potentials {
            f: pot.f.clone(),
            g: pot.g.iter().zip(&step).map(|(g, d)| g + d).collect(),
        };
        row_update(self.cost, &self.log_a, eps, &mut trial);
        let v = violation(self.cost, self.a, self.b, eps, &trial);
        if v < current {
            *pot = trial;
            *radius = (*radius * 2.0).min(MAX_RADIUS * eps);
            Some(v)
        } else {
            *radius *= 0.25;
            None
        }
    }
}

fn row_update(cost: &CostMatrix, log_a: &[f64], eps: f64, pot: &mut Potentials) {
    for i in 0..cost.rows() {
        pot.f[i] = eps * (log_a[i] - lse_row(cost, &pot.g, i, eps));
    }
}

/// Solves `λ x_j + Σ_k w_jk (x_j − x_k) = rhs_j` for `j < m − 1` with
/// `x_{m−1} = 0`.
///
/// Gaussian elimination in the Grassmann–Taksar–Heyman form: every pivot is
/// the sum of the weights still attached to its node, never a difference,
/// so weights spanning hundreds of orders of magnitude stay accurate.
/// `None` when a node is cut off from the grounded one.
fn solve_grounded_laplacian(mut w: Vec<f64>, mut rhs: Vec<f64>, m: usize, lambda: f64) -> Option<Vec<f64>> {
    let ground = m - 1;
    for j in 0..ground {
        w[j * m + ground] += lambda;
    }
    let mut pivot = vec![0.0; m];
    for j in 0..ground {
        let d: f64 = w[j * m + j + 1..(j + 1) * m].iter().sum();
        if !(d > 0.0) {
            return None;
        }
        pivot[j] = d;
        for l in j + 1..ground {
            let wlj = w[l * m + j];
            if wlj == 0.0 {
                continue;
            }
            rhs[l] += wlj * rhs[j] / d;
            for k in j + 1..m {
                if k != l {
                    w[l * m + k] += wlj * w[j * m + k] / d;
                }
            }
        }
    }
    let mut x = vec![0.0; m];
    for j in (0..ground).rev() {
        let s: f64 = (j + 1..m).map(|k| w[j * m + k] * x[k]).sum();
        x[j] = (rhs[j] + s) / pivot[j];
    }
    Some(x)
}

/// Entropic transport between histograms `a` and `b` (strictly positive,
/// summing to one) under `cost`.
///
/// Potentials move by about epsilon per step, so small targets are reached
/// through a ladder that halves epsilon from the cost scale, solving each
/// rung loosely and carrying the potentials down. The target epsilon is
/// then iterated until the marginal violation falls below `tol`.
pub fn sinkhorn_log(cost: &CostMatrix, a: &[f64], b: &[f64], params: &SinkhornParams) -> SinkhornOutput {
    let (n, m) = (cost.rows(), cost.cols());
    debug_assert_eq!(a.len(), n);
    debug_assert_eq!(b.len(), m);
    let problem = Problem {
        cost,
        a,
        b,
        log_a: a.iter().map(|x| x.ln()).collect(),
        log_b: b.iter().map(|x| x.ln()).collect(),
    };
    let mut pot = Potentials {
        f: vec![0.0; n],
        g: vec![0.0; m],
    };

    let target = params.epsilon;
    let mut eps = cost.max().max(target);
    let mut scratch = Vec::new();
    while eps > target {
        scratch.clear();
        problem.solve(eps, LADDER_TOL.max(params.tol), LADDER_MAX_ITER, &mut pot, &mut scratch);
        eps = (eps * 0.5).max(target);
    }

    let mut violations = Vec::new();
    let converged = problem.solve(target, params.tol, params.max_iter, &mut pot, &mut violations);

    let mut mass = vec![0.0; n * m];
    for i in 0..n {
        let row = cost.row(i);
        for j in 0..m {
            mass[i * m + j] = ((pot.f[i] + pot.g[j] - row[j]) / target).exp();
        }
    }
    SinkhornOutput {
        plan: TransportPlan::new(n, m, mass, a.to_vec(), b.to_vec()),
        converged,
        iterations: violations.len(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_handles_neg_infinity() {
        assert_eq!(log_sum_exp([f64::NEG_INFINITY; 3].into_iter()), f64::NEG_INFINITY);
        assert!((log_sum_exp([0.0, 0.0].into_iter()) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp([1000.0, 1000.0].into_iter()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    fn scattered(n: usize, m: usize, seed: f64) -> (CostMatrix, Vec<f64>, Vec<f64>) {
        let pt = |i: usize, k: f64| [(i as f64 * k + seed).fract(), (i as f64 * k * 1.7 + 0.3).fract(), (i as f64 * 0.13 + k).fract()];
        let (xs, ys): (Vec<[f64; 3]>, Vec<[f64; 3]>) = ((0..n).map(|i| pt(i, 0.37)).collect(), (0..m).map(|j| pt(j, 0.61)).collect());
        (CostMatrix::euclidean(&xs, &ys, 2.0), vec![1.0 / n as f64; n], vec![1.0 / m as f64; m])
    }

    #[test]
    fn violation_is_non_increasing() {
        // small (Newton) and large (over-relaxed) problems, loose and tight epsilon
        for (n, m) in [(7, 5), (16, 16), (230, 190)] {
            for eps in [1e-2, 1e-3] {
                let (cost, a, b) = scattered(n, m, 0.1);
                let out = sinkhorn_log(&cost, &a, &b, &SinkhornParams { epsilon: eps, max_iter: 300, tol: 1e-12 });
                for w in out.violations.windows(2) {
                    assert!(w[1] <= w[0], "{n}x{m} eps {eps}: {} then {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn near_permutation_plans_converge_tightly() {
        let (cost, a, b) = scattered(16, 16, 0.4);
        let out = sinkhorn_log(&cost, &a, &b, &SinkhornParams { epsilon: 1e-3, max_iter: 1000, tol: 1e-12 });
        assert!(out.converged, "{:?}", out.violations.last());
        assert!(out.plan.max_marginal_error() < 1e-12);
    }

    #[test]
    fn grounded_laplacian_solve() {
        // weights spanning many orders of magnitude; the residual itself is
        // evaluated in floating point, hence the loose relative check
        let m = 5;
        let mut w = vec![0.0; m * m];
        for (j, k, v) in [(0, 1, 1.0), (1, 2, 1e-30), (2, 3, 0.5), (3, 4, 1e-8), (0, 4, 2.0)] {
            w[j * m + k] = v;
            w[k * m + j] = v;
        }
        let rhs = vec![1e-9, -2e-9, 3e-31, -1e-31, 0.0];
        let x = solve_grounded_laplacian(w.clone(), rhs.clone(), m, 0.0).unwrap();
        assert_eq!(x[m - 1], 0.0);
        for j in 0..m - 1 {
            let lhs: f64 = (0..m).map(|k| w[j * m + k] * (x[j] - x[k])).sum();
            assert!((lhs - rhs[j]).abs() <= 1e-6 * rhs[j].abs() + 1e-45, "row {j}: {lhs} vs {}", rhs[j]);
        }
        // a node with no edges cannot be solved for
        let mut cut = w.clone();
        for k in 0..m {
            cut[2 * m + k] = 0.0;
            cut[k * m + 2] = 0.0;
        }
        assert!(solve_grounded_laplacian(cut, rhs, m, 0.0).is_none());
    }
}

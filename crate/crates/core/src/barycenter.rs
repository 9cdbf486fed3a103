//! Fixed-support Wasserstein barycenters on a regular grid over the unit cube.
//!
//! The ground cost is the squared Euclidean distance between bin centers.
//! It splits into one term per axis, so the Gibbs kernel is a tensor product
//! of three small `r × r` kernels and every kernel application is done axis
//! by axis in the log domain, never forming the full `N × N` matrix.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::format_float;
use crate::error::{Error, Result};
use crate::hierarchy::Clustering;
use crate::parallel::map_indexed;
use crate::preprocess::PointCloud;
use crate::transport::log_sum_exp;

/// Masses below this are treated as empty bins.
const MASS_FLOOR: f64 = 1e-12;

/// Marginal L1 violation at which objective transports stop.
const TRANSPORT_TOL: f64 = 1e-9;
const TRANSPORT_MAX_ITER: usize = 5_000;
/// Iterations over which the contraction rate is estimated.
const RATE_WINDOW: usize = 5;
/// Past steps kept for extrapolating the scaling iteration.
const ANDERSON_DEPTH: usize = 5;
/// An extrapolated step may move the barycenter at most this many times
/// the smallest accepted move so far.
const CHANGE_SLACK: f64 = 10.0;
/// Smallest plain-arithmetic kernel output trusted without the line-by-line
/// log-sum-exp.
const SCALED_FLOOR: f64 = 1e-250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHistogram {
    pub resolution: [usize; 3],
    pub masses: Vec<f64>,
}

impl GridHistogram {
    pub fn new(resolution: [usize; 3], masses: Vec<f64>) -> Result<Self> {
        check_resolution(resolution)?;
        let n: usize = resolution.iter().product();
        if masses.len() != n {
            return Err(Error::Size(format!("{} masses for a grid of {n} bins", masses.len())));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::validation("histogram masses must be finite and non-negative"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("histogram mass sums to {total}, expected 1")));
        }
        Ok(GridHistogram { resolution, masses })
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// Center of bin `flat` in the unit cube.
    pub fn center(&self, flat: usize) -> [f64; 3] {
        let [_, ry, rz] = self.resolution;
        let idx = [flat / (ry * rz), (flat / rz) % ry, flat % rz];
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (idx[a] as f64 + 0.5) / self.resolution[a] as f64;
        }
        c
    }

    /// Mass-weighted mean position.
    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (i, &w) in self.masses.iter().enumerate() {
            let c = self.center(i);
            for a in 0..3 {
                m[a] += w * c[a];
            }
        }
        m
    }

    /// Shannon entropy `−Σ m log m`.
    pub fn entropy(&self) -> f64 {
        -self.masses.iter().filter(|&&m| m > 0.0).map(|m| m * m.ln()).sum::<f64>()
    }

    pub fn l1_distance(&self, other: &GridHistogram) -> f64 {
        self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Plot-ready `x,y,z,mass` rows for non-empty bins.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["x", "y", "z", "mass"])?;
        for (i, &m) in self.masses.iter().enumerate() {
            if m > 0.0 {
                let c = self.center(i);
                wtr.write_record([format_float(c[0]), format_float(c[1]), format_float(c[2]), format_float(m)])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<histogram writer>", e))?;
        Ok(())
    }
}

fn check_resolution(resolution: [usize; 3]) -> Result<()> {
    if resolution.contains(&0) {
        return Err(Error::Argument(format!("grid resolution {resolution:?} must be positive")));
    }
    Ok(())
}

/// Bins a cloud: each point adds `1/n` to the half-open bin containing it,
/// with the top edge `1.0` falling in the last bin.
pub fn discretize(cloud: &PointCloud, resolution: [usize; 3]) -> Result<GridHistogram> {
    check_resolution(resolution)?;
    if cloud.is_empty() {
        return Err(Error::Size(format!("point cloud {} is empty", cloud.city_id)));
    }
    let [_, ry, rz] = resolution;
    let mut masses = vec![0.0; resolution.iter().product()];
    let w = cloud.weight();
    for p in &cloud.points {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let v = p[a];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "point {p:?} of {} lies outside the unit cube",
                    cloud.city_id
                )));
            }
            idx[a] = ((v * resolution[a] as f64) as usize).min(resolution[a] - 1);
        }
        masses[(idx[0] * ry + idx[1]) * rz + idx[2]] += w;
    }
    Ok(GridHistogram { resolution, masses })
}

/// Tensor-product Gibbs kernel for squared Euclidean cost on a grid.
struct GridKernel {
    res: [usize; 3],
    axes: [AxisKernel; 3],
    /// Same kernels multiplied by the axis cost, used to integrate the cost.
    cost_axes: [AxisKernel; 3],
}

/// One `r × r` factor, kept both as `K_ij` and `log K_ij`.
struct AxisKernel {
    r: usize,
    k: Vec<f64>,
    log_k: Vec<f64>,
}

impl AxisKernel {
    fn new(r: usize, eps: f64, with_cost: bool) -> Self {
        let mut log_k = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                let c = (i as f64 - j as f64) / r as f64;
                let c2 = c * c;
                log_k[i * r + j] = if with_cost { c2.ln() - c2 / eps } else { -c2 / eps };
            }
        }
        AxisKernel {
            r,
            k: log_k.iter().map(|v| v.exp()).collect(),
            log_k,
        }
    }

    /// `out_i = log Σ_j K_ij exp(v_j)` for one grid line. The max-shifted
    /// product is used when it is well above underflow, otherwise the exact
    /// log-sum-exp.
    fn apply_line(&self, v: &[f64], shifted: &mut [f64], out: &mut [f64]) {
        let r = self.r;
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            out.fill(f64::NEG_INFINITY);
            return;
        }
        for (s, x) in shifted.iter_mut().zip(v) {
            *s = (x - m).exp();
        }
        for i in 0..r {
            let row = &self.k[i * r..(i + 1) * r];
            let sum: f64 = row.iter().zip(shifted.iter()).map(|(a, b)| a * b).sum();
            out[i] = if sum > 1e-200 {
                sum.ln() + m
            } else {
                let log_row = &self.log_k[i * r..(i + 1) * r];
                log_sum_exp((0..r).map(|j| log_row[j] + v[j]))
            };
        }
    }
}

impl GridKernel {
    fn new(res: [usize; 3], eps: f64) -> Self {
        let axes = |with_cost| [0, 1, 2].map(|a| AxisKernel::new(res[a], eps, with_cost));
        GridKernel {
            res,
            axes: axes(false),
            cost_axes: axes(true),
        }
    }

    fn len(&self) -> usize {
        self.res.iter().product()
    }

    fn apply_axis(&self, src: &[f64], dst: &mut [f64], axis: usize, kernel: &AxisKernel) {
        let strides = [self.res[1] * self.res[2], self.res[2], 1];
        let (r, s) = (self.res[axis], strides[axis]);
        let (mut line, mut shifted, mut out) = (vec![0.0; r], vec![0.0; r], vec![0.0; r]);
        let outer = src.len() / (r * s);
        for o in 0..outer {
            for inner in 0..s {
                let base = o * r * s + inner;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = src[base + j * s];
                }
                kernel.apply_line(&line, &mut shifted, &mut out);
                for (i, v) in out.iter().enumerate() {
                    dst[base + i * s] = *v;
                }
            }
        }
    }

    /// `log Σ_j K_ij exp(v_j)`, with axis `cost_axis` (if any) using `K ∘ C`.
    fn apply_with(&self, v: &[f64], cost_axis: Option<usize>) -> Vec<f64> {
        let kernels = [0, 1, 2].map(|a| if cost_axis == Some(a) { &self.cost_axes[a] } else { &self.axes[a] });
        if let Some(out) = self.apply_scaled(v, kernels) {
            return out;
        }
        let mut cur = v.to_vec();
        let mut next = vec![0.0; v.len()];
        for axis in (0..3).rev() {
            self.apply_axis(&cur, &mut next, axis, kernels[axis]);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Same product in plain arithmetic: one shift per line of the last
    /// axis, then one per plane and one overall, so only the first and last
    /// pass touch exp and ln. Returns `None` when some output fell too close
    /// to underflow to trust, and the caller redoes it line by line.
    fn apply_scaled(&self, v: &[f64], k: [&AxisKernel; 3]) -> Option<Vec<f64>> {
        let [r0, r1, r2] = self.res;
        let n = v.len();
        // last axis: contiguous lines, each with its own shift
        let mut w1 = vec![0.0; n];
        let mut line_max = vec![f64::NEG_INFINITY; r0 * r1];
        let mut e = vec![0.0; r2];
        for (l, m) in line_max.iter_mut().enumerate() {
            let src = &v[l * r2..(l + 1) * r2];
            *m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if *m == f64::NEG_INFINITY {
                continue;
            }
            for (x, s) in e.iter_mut().zip(src) {
                *x = (s - *m).exp();
            }
            let dst = &mut w1[l * r2..(l + 1) * r2];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = k[2].k[i * r2..(i + 1) * r2].iter().zip(&e).map(|(a, b)| a * b).sum();
            }
        }
        // middle axis, one shift per plane
        let mut w2 = vec![0.0; n];
        let mut plane_max = vec![f64::NEG_INFINITY; r0];
        let mut phi = vec![0.0; r1];
        for i0 in 0..r0 {
            let maxes = &line_max[i0 * r1..(i0 + 1) * r1];
            let pm = maxes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            plane_max[i0] = pm;
            if pm == f64::NEG_INFINITY {
                continue;
            }
            for (p, m) in phi.iter_mut().zip(maxes) {
                *p = (m - pm).exp();
            }
            let plane = i0 * r1 * r2;
            for i1 in 0..r1 {
                let dst = plane + i1 * r2;
                for j in 0..r1 {
                    let c = k[1].k[i1 * r1 + j] * phi[j];
                    if c == 0.0 {
                        continue;
                    }
                    let src = plane + j * r2;
                    for t in 0..r2 {
                        w2[dst + t] += c * w1[src + t];
                    }
                }
            }
        }
        // first axis, one shift overall
        let top = plane_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Some(vec![f64::NEG_INFINITY; n]);
        }
        let psi: Vec<f64> = plane_max.iter().map(|m| (m - top).exp()).collect();
        let block = r1 * r2;
        let mut w3 = vec![0.0; n];
        for i0 in 0..r0 {
            for j in 0..r0 {
                let c = k[0].k[i0 * r0 + j] * psi[j];
                if c == 0.0 {
                    continue;
                }
                for t in 0..block {
                    w3[i0 * block + t] += c * w2[j * block + t];
                }
            }
        }
        let mut out = w3;
        for x in out.iter_mut() {
            if !(*x > SCALED_FLOOR) || !x.is_finite() {
                return None;
            }
            *x = x.ln() + top;
        }
        Some(out)
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.apply_with(v, None)
    }
}

fn log_masses(m: &[f64]) -> Vec<f64> {
    m.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect()
}

/// Entropic transport between two grid histograms; returns the sharp cost
/// `Σ π_ij C_ij`, the regularized cost, and whether the marginal violation
/// reached `tol`.
struct GridTransport {
    sharp: f64,
    regularized: f64,
    converged: bool,
}

/// `warm` seeds the log scalings; without it a short epsilon ladder is run
/// first.
fn grid_transport(
    kernel: &GridKernel,
    alpha: &[f64],
    beta: &[f64],
    eps: f64,
    warm: Option<Vec<f64>>,
) -> GridTransport {
    let (la, lb) = (log_masses(alpha), log_masses(beta));
    let n = kernel.len();
    let mut f = vec![0.0; n];
    let warm_started = warm.is_some();
    let mut g = warm.unwrap_or_else(|| vec![0.0; n]);
    let sweep = |k: &GridKernel, f: &mut Vec<f64>, g: &mut Vec<f64>| {
        let kg = k.apply(g);
        for i in 0..n {
            f[i] = la[i] - kg[i];
        }
        let kf = k.apply(f);
        for j in 0..n {
            g[j] = lb[j] - kf[j];
        }
    };
    // warm start along a coarse-to-fine epsilon ladder; potentials are
    // carried over in the scale-free form eps * log-scaling
    let mut stage = if warm_started { eps } else { (eps * 64.0).min(1.0).max(eps) };
    while stage > eps {
        let coarse = GridKernel::new(kernel.res, stage);
        for _ in 0..20 {
            sweep(&coarse, &mut f, &mut g);
        }
        let next = (stage / 4.0).max(eps);
        let ratio = stage / next;
        f.iter_mut().for_each(|v| *v *= ratio);
        g.iter_mut().for_each(|v| *v *= ratio);
        stage = next;
    }
    let mut converged = false;
    // K g from the end of one sweep is what the next one starts from
    let mut kg = kernel.apply(&g);
    for _ in 0..TRANSPORT_MAX_ITER {
        for i in 0..n {
            f[i] = la[i] - kg[i];
        }
        let kf = kernel.apply(&f);
        for j in 0..n {
            g[j] = lb[j] - kf[j];
        }
        kg = kernel.apply(&g);
        let viol: f64 = (0..n)
            .map(|i| {
                let row = if la[i] == f64::NEG_INFINITY { 0.0 } else { (f[i] + kg[i]).exp() };
                (row - alpha[i]).abs()
            })
            .sum();
        if viol < TRANSPORT_TOL {
            converged = true;
            break;
        }
    }
    let mut sharp = 0.0;
    for axis in 0..3 {
        let kcg = kernel.apply_with(&g, Some(axis));
        sharp += (0..n)
            .filter(|&i| la[i] > f64::NEG_INFINITY)
            .map(|i| (f[i] + kcg[i]).exp())
            .sum::<f64>();
    }
    // ε·KL(π | α⊗β) = ε(⟨f, α⟩ + ⟨g, β⟩ − ⟨α, log α⟩ − ⟨β, log β⟩) − ⟨π, C⟩
    let dot = |x: &[f64], w: &[f64]| -> f64 { x.iter().zip(w).filter(|(_, &m)| m > 0.0).map(|(a, m)| a * m).sum() };
    let kl_term = dot(&f, alpha) + dot(&g, beta) - dot(&la, alpha) - dot(&lb, beta);
    GridTransport {
        sharp,
        regularized: eps * kl_term,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarycenterParams {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once successive iterates differ by less than this in L1 and the
    /// estimated distance to the fixed point is below it too.
    pub tol: f64,
    /// Remove the entropic self-blur so identical inputs are a fixed point.
    pub debias: bool,
}

impl Default for BarycenterParams {
    fn default() -> Self {
        BarycenterParams {
            epsilon: 0.01,
            max_iter: 1000,
            tol: 1e-8,
            debias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterResult {
    pub histogram: GridHistogram,
    /// Weighted mean of sharp transport costs to the inputs.
    pub objective: f64,
    /// Same with the entropic term included.
    pub regularized_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_inputs(hists: &[GridHistogram], weights: &[f64]) -> Result<[usize; 3]> {
    let first = hists.first().ok_or_else(|| Error::Size("no histograms".into()))?;
    if hists.iter().any(|h| h.resolution != first.resolution) {
        return Err(Error::validation("histograms have mixed resolutions"));
    }
    if weights.len() != hists.len() {
        return Err(Error::Size(format!("{} weights for {} histograms", weights.len(), hists.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("weights must be non-negative and sum to 1"));
    }
    Ok(first.resolution)
}

fn floor_and_normalize(v: &mut [f64]) {
    for m in v.iter_mut() {
        if !(*m >= MASS_FLOOR) {
            *m = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    for m in v.iter_mut() {
        *m /= s;
    }
}

/// Weighted mean of sharp entropic transport costs from `candidate` to each
/// input, `(sharp, regularized)`.
pub fn barycenter_objective(
    candidate: &GridHistogram,
    hists: &[GridHistogram],
    weights: &[f64],
    epsilon: f64,
) -> Result<(f64, f64)> {
    let res = check_inputs(hists, weights)?;
    if candidate.resolution != res {
        return Err(Error::validation("candidate resolution differs from inputs"));
    }
    let kernel = GridKernel::new(res, epsilon);
    Ok(objective_with(&kernel, &candidate.masses, hists, weights, epsilon, None))
}

fn objective_with(
    kernel: &GridKernel,
    mu: &[f64],
    hists: &[GridHistogram],
    weights: &[f64],
    eps: f64,
    warm: Option<&[Vec<f64>]>,
) -> (f64, f64) {
    let parts = map_indexed(hists.len(), |k| {
        if weights[k] == 0.0 {
            return (0.0, 0.0);
        }
        let t = grid_transport(kernel, &hists[k].masses, mu, eps, warm.map(|w| w[k].clone()));
        if !t.converged {
            log::debug!("objective transport {k} stopped before reaching its tolerance");
        }
        (weights[k] * t.sharp, weights[k] * t.regularized)
    });
    parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1))
}

/// Entropic fixed-support barycenter by iterative Bregman projections in the
/// log domain.
pub fn wasserstein_barycenter(
    hists: &[GridHistogram],
    weights: &[f64],
    params: &BarycenterParams,
) -> Result<BarycenterResult> {
    let res = check_inputs(hists, weights)?;
    if !(params.epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {}", params.epsilon)));
    }
    let eps = params.epsilon;
    let kernel = GridKernel::new(res, eps);
    let n = kernel.len();
    let inputs: Vec<Vec<f64>> = hists
        .iter()
        .map(|h| {
            let mut m = h.masses.clone();
            floor_and_normalize(&mut m);
            m
        })
        .collect();
    let log_inputs: Vec<Vec<f64>> = inputs.iter().map(|m| log_masses(m)).collect();

    // state: log scalings g_k on the barycenter side, then the debiasing
    // potential d, all in one vector so the step can be extrapolated
    let n_hist = hists.len();
    let mut x = vec![0.0; (n_hist + 1) * n];
    let step = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let kf: Vec<Vec<f64>> = map_indexed(n_hist, |k| {
            let kg = kernel.apply(&x[k * n..(k + 1) * n]);
            let f: Vec<f64> = (0..n).map(|i| log_inputs[k][i] - kg[i]).collect();
            kernel.apply(&f)
        });
        let log_d = &x[n_hist * n..];
        let mut log_b = if params.debias { log_d.to_vec() } else { vec![0.0; n] };
        for (k, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                for i in 0..n {
                    log_b[i] += w * kf[k][i];
                }
            }
        }
        let mut next = vec![0.0; x.len()];
        for k in 0..n_hist {
            for i in 0..n {
                next[k * n + i] = log_b[i] - kf[k][i];
            }
        }
        if params.debias {
            let kd = kernel.apply(log_d);
            for i in 0..n {
                next[n_hist * n + i] = 0.5 * (log_d[i] + log_b[i] - kd[i]);
            }
        }
        (next, log_b)
    };

    let mut accel = Anderson::new(ANDERSON_DEPTH);
    let mut current = vec![1.0 / n as f64; n];
    let mut converged = false;
    let mut iterations = 0;
    // moves of the barycenter over the current run of plain steps; the
    // stopping rule only looks at these, since extrapolated steps say
    // nothing about the contraction rate
    let mut plain: Vec<f64> = Vec::new();

    while iterations < params.max_iter {
        iterations += 1;
        let (tx, log_b) = step(&x);
        let max = log_b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut next: Vec<f64> = log_b.iter().map(|v| (v - max).exp()).collect();
        floor_and_normalize(&mut next);
        let change: f64 = next.iter().zip(&current).map(|(a, b)| (a - b).abs()).sum();
        if let Some(back) = accel.reject(&x, &tx, change) {
            x = back;
            continue;
        }
        current = next;
        if change >= params.tol {
            plain.clear();
            x = accel.next(&x, tx, change);
            continue;
        }
        if plain.is_empty() {
            accel.reset();
        }
        plain.push(change);
        x = tx;
        // a small step is not enough when the iteration contracts slowly:
        // the remaining distance to the fixed point is about change / (1 − ρ),
        // with ρ the mean contraction per step over the last few steps
        let t = plain.len();
        if t > RATE_WINDOW && plain[t - 1 - RATE_WINDOW] > 0.0 {
            let rho = (change / plain[t - 1 - RATE_WINDOW]).powf(1.0 / RATE_WINDOW as f64);
            if rho < 1.0 && change / (1.0 - rho) < params.tol {
                converged = true;
                break;
            }
        } else if t > RATE_WINDOW && change == 0.0 {
            converged = true;
            break;
        }
    }
    let g: Vec<Vec<f64>> = (0..n_hist).map(|k| x[k * n..(k + 1) * n].to_vec()).collect();

    let (objective, regularized_objective) = objective_with(&kernel, &current, hists, weights, eps, Some(&g));
    Ok(BarycenterResult {
        histogram: GridHistogram {
            resolution: res,
            masses: current,
        },
        objective,
        regularized_objective,
        iterations,
        converged,
    })
}

/// Anderson extrapolation of a fixed-point iteration x ← T(x). `next` gets
/// the current point and its image and returns the next point. An
/// extrapolated point whose residual is larger than that of the point it
/// came from is rejected, and the iteration resumes from the plain image of
/// that earlier point with an empty history.
struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dx: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    /// Plain image, residual norm and barycenter change of the last accepted
    /// point, kept while the current point is an extrapolation.
    fallback: Option<(Vec<f64>, f64, f64)>,
    last_norm: f64,
    best_change: f64,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            prev: None,
            dx: Vec::new(),
            df: Vec::new(),
            fallback: None,
            last_norm: f64::INFINITY,
            best_change: f64::INFINITY,
        }
    }

    fn reset(&mut self) {
        self.prev = None;
        self.dx.clear();
        self.df.clear();
        self.fallback = None;
    }

    /// `change` is how far the image moves the barycenter. It is checked too
    /// because the residual is dominated by nearly empty bins.
    fn reject(&mut self, x: &[f64], tx: &[f64], change: f64) -> Option<Vec<f64>> {
        let norm = residual_norm(x, tx);
        let (_, good, _) = self.fallback.as_ref()?;
        if norm.is_finite() && norm <= *good && change <= CHANGE_SLACK * self.best_change {
            return None;
        }
        let (back, good, _) = self.fallback.take()?;
        self.reset();
        self.last_norm = good;
        Some(back)
    }

    fn next(&mut self, x: &[f64], tx: Vec<f64>, change: f64) -> Vec<f64> {
        let f: Vec<f64> = tx.iter().zip(x).map(|(a, b)| a - b).collect();
        let norm = residual_norm(x, &tx);
        self.last_norm = norm;
        self.fallback = None;
        if let Some((px, pf)) = self.prev.take() {
            self.dx.push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.df.push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((x.to_vec(), f.clone()));
        let m = self.df.len();
        if m == 0 {
            return tx;
        }
        // least squares min |f − ΔF γ| through the normal equations
        let mut a = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            rhs[i] = dot(&self.df[i], &f);
            for j in 0..=i {
                let v = dot(&self.df[i], &self.df[j]);
                a[i * m + j] = v;
                a[j * m + i] = v;
            }
        }
        let trace: f64 = (0..m).map(|i| a[i * m + i]).sum();
        for i in 0..m {
            a[i * m + i] += 1e-10 * trace + f64::MIN_POSITIVE;
        }
        let Some(gamma) = solve_spd(&mut a, rhs, m) else {
            return tx;
        };
        let mut out = tx.clone();
        for (k, gk) in gamma.iter().enumerate() {
            for i in 0..out.len() {
                out[i] -= gk * (self.dx[k][i] + self.df[k][i]);
            }
        }
        self.fallback = Some((tx, norm, change));
        self.best_change = self.best_change.min(change);
        out
    }
}

fn residual_norm(x: &[f64], tx: &[f64]) -> f64 {
    x.iter().zip(tx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky solve of a small symmetric positive definite system.
fn solve_spd(a: &mut [f64], mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / d;
        }
    }
    for i in 0..m {
        for k in 0..i {
            b[i] -= a[i * m + k] * b[k];
        }
        b[i] /= a[i * m + i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            b[i] -= a[k * m + i] * b[k];
        }
        b[i] /= a[i * m + i];
    }
    Some(b)
}

/// Per-cluster barycenters of the members' histograms with uniform weights.
/// Singleton clusters return their member's histogram unchanged.
pub fn cluster_barycenters(
    clouds: &[PointCloud],
    clustering: &Clustering,
    resolution: [usize; 3],
    params: &BarycenterParams,
) -> Result<BTreeMap<usize, BarycenterResult>> {
    let index: std::collections::HashMap<&str, usize> =
        clouds.iter().enumerate().map(|(i, c)| (c.city_id.as_str(), i)).collect();
    let mut out = BTreeMap::new();
    for (label, members) in clustering.members() {
        let hists = members
            .iter()
            .map(|&m| {
                let id = &clustering.ids[m];
                let &ci = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::validation(format!("no point cloud for clustered city {id}")))?;
                discretize(&clouds[ci], resolution)
            })
            .collect::<Result<Vec<_>>>()?;
        let result = if hists.len() == 1 {
            BarycenterResult {
                histogram: hists.into_iter().next().expect("one member"),
                objective: 0.0,
                regularized_objective: 0.0,
                iterations: 0,
                converged: true,
            }
        } else {
            let w = vec![1.0 / hists.len() as f64; hists.len()];
            wasserstein_barycenter(&hists, &w, params)?
        };
        if !result.converged {
            log::warn!("barycenter of cluster {label} stopped after {} iterations", result.iterations);
        }
        out.insert(label, result);
    }
    Ok(out)
}

//! Reaction time and spatial autocorrelation of cluster labels.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::SpatialWeights;
use crate::error::{Error, Result};
use crate::hierarchy::Clustering;

/// Reference date of the reaction-time covariate.
pub fn default_reference_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 15).expect("valid date")
}

/// Value used for cities that never issued an order.
pub const NO_ORDER_REACTION_TIME: i64 = 85;

/// Whole days from `reference` to the stay-at-home order, `absent_value`
/// when there was none.
pub fn reaction_time(stay_at_home: Option<NaiveDate>, reference: NaiveDate, absent_value: i64) -> i64 {
    match stay_at_home {
        Some(d) => {
            let days = (d - reference).num_days();
            if days < -366 {
                log::warn!("stay-at-home date {d} is more than a year before {reference}");
            }
            days
        }
        None => absent_value,
    }
}

/// Moran's I of `x` under `w`:
/// `I = (n / Σw) · Σ_ij w_ij z_i z_j / Σ_i z_i²`, `z = x − mean(x)`.
pub fn morans_i(x: &[f64], w: &SpatialWeights) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Size(format!("Moran's I needs at least 2 values, got {n}")));
    }
    if w.len() != n {
        return Err(Error::Size(format!("{n} values but weights over {} locations", w.len())));
    }
    let s0 = w.total();
    if s0 <= 0.0 {
        return Err(Error::validation("spatial weights are all zero"));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let denom: f64 = z.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::Undefined("Moran's I of a constant field".into()));
    }
    let mut num = 0.0;
    for i in 0..n {
        if z[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..n {
            row += w.get(i, j) * z[j];
        }
        num += z[i] * row;
    }
    Ok(n as f64 / s0 * num / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAutocorrelation {
    pub label: usize,
    pub size: usize,
    pub i: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoranReport {
    pub per_label: Vec<LabelAutocorrelation>,
    /// Cardinality-weighted mean of the per-label statistics.
    pub i: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub seed: u64,
}

fn indicator_stats(labels: &[usize], c: usize, w: &SpatialWeights) -> Result<(Vec<f64>, f64)> {
    let n = labels.len();
    let mut per = Vec::with_capacity(c);
    let mut weighted = 0.0;
    for l in 1..=c {
        let x: Vec<f64> = labels.iter().map(|&v| if v == l { 1.0 } else { 0.0 }).collect();
        let size = labels.iter().filter(|&&v| v == l).count();
        let i = morans_i(&x, w)?;
        weighted += size as f64 * i;
        per.push(i);
    }
    Ok((per, weighted / n as f64))
}

/// Moran's I of each one-hot cluster indicator with one-sided permutation
/// p-values `(1 + #{I_perm ≥ I_obs}) / (1 + n_perm)`.
pub fn morans_i_labels(c: &Clustering, w: &SpatialWeights, n_perm: usize, seed: u64) -> Result<MoranReport> {
    if c.ids.as_slice() != w.ids() {
        return Err(Error::validation("clustering and spatial weights list different ids"));
    }
    let k = c.n_clusters();
    let (obs, obs_mean) = indicator_stats(&c.labels, k, w)?;
    let mut exceed = vec![0usize; k];
    let mut exceed_mean = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = c.labels.clone();
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        let (per, mean) = indicator_stats(&shuffled, k, w)?;
        for l in 0..k {
            if per[l] >= obs[l] {
                exceed[l] += 1;
            }
        }
        if mean >= obs_mean {
            exceed_mean += 1;
        }
    }
    let p = |e: usize| (1 + e) as f64 / (1 + n_perm) as f64;
    let sizes = c.sizes();
    Ok(MoranReport {
        per_label: (0..k)
            .map(|l| LabelAutocorrelation {
                label: l + 1,
                size: sizes[l],
                i: obs[l],
                p_value: p(exceed[l]),
            })
            .collect(),
        i: obs_mean,
        p_value: p(exceed_mean),
        permutations: n_perm,
        seed,
    })
}

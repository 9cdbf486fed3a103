//! Monte Carlo permutation estimates of Shapley values for class scores.
//!
//! One sample draws a feature order and a background row `z`, then walks from
//! `z` to `x` switching one feature at a time; each step's score change is
//! that feature's marginal contribution. The steps of one walk telescope to
//! `f(x) − f(z)`, so the estimates sum to `f(x)` minus the mean score of the
//! sampled background rows.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::format_float;
use crate::error::{Error, Result};
use crate::features::{labels_for, FeatureTable};
use crate::forest::ClassScorer;
use crate::hierarchy::Clustering;
use crate::parallel::{derive_seed, map_indexed};

pub const MIN_SAMPLES: usize = 10;

/// Shapley estimates for one instance, `phi[j * classes + k]` for feature
/// `j` and class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceShapley {
    pub classes: usize,
    pub phi: Vec<f64>,
    /// Standard error of each entry of `phi`.
    pub se: Vec<f64>,
    /// Scores of the explained instance.
    pub prediction: Vec<f64>,
    /// Standard error of `Σ_j phi` per class, from the spread of the
    /// background scores.
    pub total_se: Vec<f64>,
}

impl InstanceShapley {
    pub fn get(&self, feature: usize, class: usize) -> f64 {
        self.phi[feature * self.classes + class]
    }

    pub fn sum(&self, class: usize) -> f64 {
        self.phi.iter().skip(class).step_by(self.classes).sum()
    }
}

pub fn shapley_values<S: ClassScorer>(
    model: &S,
    background: &FeatureTable,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<InstanceShapley> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Argument(format!("n_samples must be at least {MIN_SAMPLES}, got {n_samples}")));
    }
    let f = background.features();
    if x.len() != f {
        return Err(Error::Size(format!("instance has {} features, background {f}", x.len())));
    }
    if background.rows() == 0 {
        return Err(Error::Size("empty background table".into()));
    }
    let kc = model.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..f).collect();
    let mut cur = vec![0.0; f];
    let (mut prev, mut next) = (vec![0.0; kc], vec![0.0; kc]);
    let mut prediction = vec![0.0; kc];
    model.scores(x, &mut prediction);

    let mut sum = vec![0.0; f * kc];
    let mut sum_sq = vec![0.0; f * kc];
    let mut base_sum = vec![0.0; kc];
    let mut base_sq = vec![0.0; kc];
    for _ in 0..n_samples {
        order.shuffle(&mut rng);
        let z = rng.gen_range(0..background.rows());
        cur.copy_from_slice(background.row(z));
        model.scores(&cur, &mut prev);
        for k in 0..kc {
            base_sum[k] += prev[k];
            base_sq[k] += prev[k] * prev[k];
        }
        for &j in &order {
            if cur[j] == x[j] {
                continue;
            }
            cur[j] = x[j];
            model.scores(&cur, &mut next);
            for k in 0..kc {
                let d = next[k] - prev[k];
                sum[j * kc + k] += d;
                sum_sq[j * kc + k] += d * d;
            }
            std::mem::swap(&mut prev, &mut next);
        }
    }
    let n = n_samples as f64;
    // standard error of a sample mean from its running sums
    let se_of = |s: f64, sq: f64| ((sq - s * s / n).max(0.0) / (n - 1.0) / n).sqrt();
    Ok(InstanceShapley {
        classes: kc,
        phi: sum.iter().map(|s| s / n).collect(),
        se: sum.iter().zip(&sum_sq).map(|(&s, &q)| se_of(s, q)).collect(),
        prediction,
        total_se: base_sum.iter().zip(&base_sq).map(|(&s, &q)| se_of(s, q)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    /// Cluster labels, `1..=k`.
    pub clusters: Vec<usize>,
    /// `per_cluster[j][c]`: mean over members of cluster `c + 1` of |φ| for
    /// feature `j`, taken on the member's own class score.
    pub per_cluster: Vec<Vec<f64>>,
    /// Mean of the same quantity over all cities.
    pub global: Vec<f64>,
    /// Feature indices by decreasing global importance.
    pub ranking: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Shapley importance of every feature for every city, aggregated per
/// cluster and globally.
pub fn shapley_importance<S: ClassScorer>(
    model: &S,
    ft: &FeatureTable,
    c: &Clustering,
    n_samples: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Argument(format!("n_samples must be at least {MIN_SAMPLES}, got {n_samples}")));
    }
    let labels = labels_for(ft, c)?;
    let k = c.n_clusters();
    if model.n_classes() < k {
        return Err(Error::validation(format!(
            "model scores {} classes but the clustering has {k}",
            model.n_classes()
        )));
    }
    let per_instance = map_indexed(ft.rows(), |i| shapley_values(model, ft, ft.row(i), n_samples, derive_seed(seed, i as u64)));
    let f = ft.features();
    let mut per_cluster = vec![vec![0.0; k]; f];
    let mut global = vec![0.0; f];
    let sizes = c.sizes();
    for (i, s) in per_instance.into_iter().enumerate() {
        let s = s?;
        let own = labels[i] - 1;
        for j in 0..f {
            let a = s.get(j, own).abs();
            per_cluster[j][own] += a / sizes[own] as f64;
            global[j] += a / ft.rows() as f64;
        }
    }
    let mut ranking: Vec<usize> = (0..f).collect();
    ranking.sort_by(|&a, &b| global[b].total_cmp(&global[a]).then_with(|| ft.names[a].cmp(&ft.names[b])));
    Ok(ImportanceReport {
        features: ft.names.clone(),
        clusters: (1..=k).collect(),
        per_cluster,
        global,
        ranking,
        n_samples,
        seed,
    })
}

impl ImportanceReport {
    /// `feature,cluster,mean_abs_shapley`, features in ranking order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature", "cluster", "mean_abs_shapley"])?;
        for &j in &self.ranking {
            for (ci, label) in self.clusters.iter().enumerate() {
                wtr.write_record([&self.features[j], &label.to_string(), &format_float(self.per_cluster[j][ci])])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<importance writer>", e))?;
        Ok(())
    }

    /// `rank,feature,mean_abs_shapley` over all cities.
    pub fn write_ranking_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rank", "feature", "mean_abs_shapley"])?;
        for (r, &j) in self.ranking.iter().enumerate() {
            wtr.write_record([&(r + 1).to_string(), &self.features[j], &format_float(self.global[j])])?;
        }
        wtr.flush().map_err(|e| Error::io("<importance writer>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two classes scored by a logistic function of `w · x`.
    struct Linear(Vec<f64>);

    impl ClassScorer for Linear {
        fn n_classes(&self) -> usize {
            2
        }
        fn scores(&self, x: &[f64], out: &mut [f64]) {
            let t: f64 = self.0.iter().zip(x).map(|(w, v)| w * v).sum();
            out[1] = 1.0 / (1.0 + (-t).exp());
            out[0] = 1.0 - out[1];
        }
    }

    fn table(n: usize, f: usize, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureTable::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..f).map(|j| format!("f{j}")).collect(),
            (0..n * f).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ignored_feature_gets_nothing() {
        let ft = table(30, 3, 1);
        let m = Linear(vec![2.0, 0.0, -1.0]);
        for i in 0..5 {
            let s = shapley_values(&m, &ft, ft.row(i), 2000, i as u64).unwrap();
            assert!(s.get(1, 0).abs() <= 0.01 && s.get(1, 1).abs() <= 0.01);
        }
    }

    #[test]
    fn single_feature_model_takes_all_credit() {
        let ft = table(30, 3, 2);
        let m = Linear(vec![0.0, 0.0, 3.0]);
        let s = shapley_values(&m, &ft, ft.row(0), 200, 1).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 1), 0.0);
        assert!(s.get(2, 1).abs() > 0.0);
    }

    #[test]
    fn efficiency_within_monte_carlo_error() {
        let ft = table(40, 4, 3);
        let m = Linear(vec![1.5, -2.0, 0.5, 1.0]);
        let mut buf = [0.0; 2];
        let base: f64 = (0..ft.rows())
            .map(|i| {
                m.scores(ft.row(i), &mut buf);
                buf[1]
            })
            .sum::<f64>()
            / ft.rows() as f64;
        for i in 0..10 {
            let s = shapley_values(&m, &ft, ft.row(i), 2000, 100 + i as u64).unwrap();
            let gap = s.sum(1) - (s.prediction[1] - base);
            assert!(gap.abs() <= 3.0 * s.total_se[1] + 1e-12, "instance {i}: gap {gap}, se {}", s.total_se[1]);
        }
    }

    #[test]
    fn duplicated_columns_share_equally() {
        let base = table(30, 2, 4);
        let mut values = Vec::new();
        for i in 0..base.rows() {
            let r = base.row(i);
            values.extend_from_slice(&[r[0], r[0], r[1]]);
        }
        let ft = FeatureTable::new(base.ids.clone(), vec!["a".into(), "a2".into(), "b".into()], values).unwrap();
        let m = Linear(vec![1.0, 1.0, 0.5]);
        let c = Clustering::new(ft.ids.clone(), (0..30).map(|i| i % 2 + 1).collect()).unwrap();
        let rep = shapley_importance(&m, &ft, &c, 2000, 5).unwrap();
        let (a, b) = (rep.global[0], rep.global[1]);
        assert!((a - b).abs() < 0.01 * a.max(b).max(0.1), "{a} vs {b}");
    }

    #[test]
    fn report_is_ranked_and_reproducible() {
        let ft = table(20, 3, 6);
        let m = Linear(vec![0.1, 3.0, 0.0]);
        let c = Clustering::new(ft.ids.clone(), (0..20).map(|i| i % 2 + 1).collect()).unwrap();
        let r1 = shapley_importance(&m, &ft, &c, 100, 9).unwrap();
        let r2 = crate::with_threads(1, || shapley_importance(&m, &ft, &c, 100, 9).unwrap());
        assert_eq!(r1, r2);
        assert_eq!(r1.ranking, vec![1, 0, 2]);
        assert!(r1.global.iter().all(|&g| g >= 0.0));
        let mut buf = Vec::new();
        r1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("feature,cluster,mean_abs_shapley\nf1,1,"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }

    #[test]
    fn too_few_samples() {
        let ft = table(12, 2, 7);
        let m = Linear(vec![1.0, 1.0]);
        assert!(matches!(shapley_values(&m, &ft, ft.row(0), 9, 0), Err(Error::Argument(_))));
    }
}

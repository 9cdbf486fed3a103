//! Random forest of CART classifiers (Gini impurity, bootstrap bagging,
//! `√f` candidate features per split, majority vote).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{labels_for, FeatureTable};
use crate::hierarchy::Clustering;
use crate::parallel::{derive_seed, map_indexed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows every tree until its leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            max_depth: None,
            min_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class index voted for by this leaf.
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(c) => return c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn root_feature(&self) -> Option<usize> {
        match self.nodes[0] {
            Node::Split { feature, .. } => Some(feature),
            Node::Leaf(_) => None,
        }
    }
}

/// A classifier that reports a score per class; Shapley values are computed
/// for any implementor.
pub trait ClassScorer: Sync {
    fn n_classes(&self) -> usize;
    /// Writes one score per class into `out`.
    fn scores(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Class `k` stands for cluster label `k + 1`.
    pub n_classes: usize,
    /// `None` when no row was ever out of bag.
    pub oob_accuracy: Option<f64>,
    pub seed: u64,
}

impl ForestModel {
    /// Fraction of trees voting for each class.
    pub fn vote_shares(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        self.scores(x, &mut out);
        out
    }

    /// Majority class, ties to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.vote_shares(x))
    }

    pub fn accuracy(&self, ft: &FeatureTable, c: &Clustering) -> Result<f64> {
        let labels = labels_for(ft, c)?;
        let hits = (0..ft.rows()).filter(|&i| self.predict(ft.row(i)) + 1 == labels[i]).count();
        Ok(hits as f64 / ft.rows() as f64)
    }
}

impl ClassScorer for ForestModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn scores(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.trees {
            out[t.predict(x)] += 1.0;
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn train_forest(ft: &FeatureTable, c: &Clustering, params: &ForestParams) -> Result<ForestModel> {
    let n = ft.rows();
    if n < 10 {
        return Err(Error::Size(format!("a forest needs at least 10 rows, got {n}")));
    }
    if ft.features() == 0 {
        return Err(Error::Size("feature table has no columns".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::Argument("n_trees must be positive".into()));
    }
    let labels = labels_for(ft, c)?;
    let n_classes = labels.iter().copied().max().unwrap_or(0);
    if n_classes < 2 {
        return Err(Error::validation("need at least 2 clusters to train a classifier"));
    }
    let classes: Vec<usize> = labels.iter().map(|l| l - 1).collect();
    let mut counts = vec![0usize; n_classes];
    for &k in &classes {
        counts[k] += 1;
    }
    for (k, &m) in counts.iter().enumerate() {
        if m < 2 {
            log::warn!("cluster {} has {m} member(s); its class is barely learnable", k + 1);
        }
    }

    let grown = map_indexed(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        for &i in &sample {
            in_bag[i] = true;
        }
        let tree = Grower {
            ft,
            classes: &classes,
            n_classes,
            params,
        }
        .grow(sample, &mut rng);
        (tree, in_bag)
    });

    let mut oob_votes = vec![vec![0usize; n_classes]; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_votes[i][tree.predict(ft.row(i))] += 1;
        }
    }
    let scored: Vec<bool> = (0..n)
        .filter(|&i| oob_votes[i].iter().any(|&v| v > 0))
        .map(|i| {
            let v: Vec<f64> = oob_votes[i].iter().map(|&x| x as f64).collect();
            argmax(&v) == classes[i]
        })
        .collect();
    let oob_accuracy = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().filter(|&&b| b).count() as f64 / scored.len() as f64)
    };

    Ok(ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        n_features: ft.features(),
        n_classes,
        oob_accuracy,
        seed: params.seed,
    })
}

struct Grower<'a> {
    ft: &'a FeatureTable,
    classes: &'a [usize],
    n_classes: usize,
    params: &'a ForestParams,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Grower<'_> {
    fn grow(&self, sample: Vec<usize>, rng: &mut ChaCha8Rng) -> Tree {
        let mut nodes = Vec::new();
        self.node(sample, 0, rng, &mut nodes);
        Tree { nodes }
    }

    fn node(&self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> usize {
        let at = nodes.len();
        let mut counts = vec![0usize; self.n_classes];
        for &i in &rows {
            counts[self.classes[i]] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .fold(0, |best, (k, &m)| if m > counts[best] { k } else { best });
        let pure = counts[majority] == rows.len();
        let depth_left = self.params.max_depth.is_none_or(|d| depth < d);
        if pure || !depth_left || rows.len() < 2 * self.params.min_leaf.max(1) {
            nodes.push(Node::Leaf(majority));
            return at;
        }
        let Some(split) = self.best_split(&rows, rng) else {
            nodes.push(Node::Leaf(majority));
            return at;
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.ft.get(i, split.feature) <= split.threshold);
        nodes.push(Node::Leaf(majority));
        let l = self.node(left, depth + 1, rng, nodes);
        let r = self.node(right, depth + 1, rng, nodes);
        nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        at
    }

    /// Examines `√f` random features; if none of them can split the node,
    /// keeps drawing from the rest until one can.
    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let f = self.ft.features();
        let mtry = ((f as f64).sqrt().floor() as usize).max(1);
        let mut order: Vec<usize> = (0..f).collect();
        order.shuffle(rng);
        let mut best: Option<BestSplit> = None;
        for (tried, &feature) in order.iter().enumerate() {
            if tried >= mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.split_on(rows, feature) {
                if best.as_ref().is_none_or(|b| s.impurity < b.impurity) {
                    best = Some(s);
                }
            }
        }
        best
    }

    /// Lowest weighted Gini impurity over midpoints between distinct values.
    fn split_on(&self, rows: &[usize], feature: usize) -> Option<BestSplit> {
        let mut pairs: Vec<(f64, usize)> = rows.iter().map(|&i| (self.ft.get(i, feature), self.classes[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut right = vec![0usize; self.n_classes];
        for &(_, k) in &pairs {
            right[k] += 1;
        }
        let mut left = vec![0usize; self.n_classes];
        let gini_sum = |c: &[usize], m: usize| -> f64 {
            // m · gini = m − Σ c_k² / m
            let sq: usize = c.iter().map(|&x| x * x).sum();
            m as f64 - sq as f64 / m as f64
        };
        let mut best: Option<BestSplit> = None;
        for s in 1..n {
            let k = pairs[s - 1].1;
            left[k] += 1;
            right[k] -= 1;
            if pairs[s - 1].0 == pairs[s].0 || s < min_leaf || n - s < min_leaf {
                continue;
            }
            let impurity = (gini_sum(&left, s) + gini_sum(&right, n - s)) / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = 0.5 * (pairs[s - 1].0 + pairs[s].0);
                if threshold >= pairs[s].0 {
                    threshold = pairs[s - 1].0;
                }
                best = Some(BestSplit {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }
}

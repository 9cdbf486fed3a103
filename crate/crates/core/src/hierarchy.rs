//! Ward agglomeration on a precomputed distance matrix, flat cuts,
//! seriation, and layered comparison of several flat clusterings.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::DistanceMatrix;

/// One agglomeration step. Nodes `0..k` are leaves; merge `t` creates node `k + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub ids: Vec<String>,
    pub merges: Vec<Merge>,
}

/// Metadata written next to every exported dendrogram.
pub const WARD_CONVENTION: &str =
    "ward: Lance-Williams recurrence on squared input distances; heights are square roots of merged squared dissimilarities";

/// Ward linkage via the Lance–Williams recurrence on squared distances.
///
/// Heights are reported as the square root of the merged squared
/// dissimilarity, so a merge of two leaves sits at their input distance.
/// Among equal candidate merges, the pair whose cluster keys (smallest member
/// id) are lexicographically smallest as `(min, max)` goes first.
pub fn ward_linkage(d: &DistanceMatrix) -> Result<Dendrogram> {
    let k = d.len();
    if k < 2 {
        return Err(Error::Size(format!("Ward linkage needs at least 2 items, got {k}")));
    }
    for i in 0..k {
        for j in 0..k {
            let v = d.get(i, j);
            if !v.is_finite() || v < 0.0 || v != d.get(j, i) {
                return Err(Error::validation(format!(
                    "distance ({}, {}) must be finite, non-negative and symmetric",
                    d.ids()[i],
                    d.ids()[j]
                )));
            }
        }
    }

    let mut d2: Vec<f64> = d.as_slice().iter().map(|v| v * v).collect();
    let mut active: Vec<bool> = vec![true; k];
    let mut node: Vec<usize> = (0..k).collect();
    let mut size: Vec<usize> = vec![1; k];
    let mut key: Vec<String> = d.ids().to_vec();
    let mut merges = Vec::with_capacity(k - 1);

    for step in 0..k - 1 {
        let mut best: Option<(usize, usize)> = None;
        for a in 0..k {
            if !active[a] {
                continue;
            }
            for b in a + 1..k {
                if !active[b] {
                    continue;
                }
                let v = d2[a * k + b];
                best = match best {
                    None => Some((a, b)),
                    Some((x, y)) => {
                        let cur = d2[x * k + y];
                        if v < cur || (v == cur && pair_key(&key, a, b) < pair_key(&key, x, y)) {
                            Some((a, b))
                        } else {
                            Some((x, y))
                        }
                    }
                };
            }
        }
        let (a, b) = best.expect("at least two active clusters");
        let dab = d2[a * k + b];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for x in 0..k {
            if !active[x] || x == a || x == b {
                continue;
            }
            let nx = size[x] as f64;
            let lw = ((na + nx) * d2[a * k + x] + (nb + nx) * d2[b * k + x] - nx * dab) / (na + nb + nx);
            // never below dab in exact arithmetic; the max only absorbs rounding
            let v = lw.max(dab);
            d2[a * k + x] = v;
            d2[x * k + a] = v;
        }
        let (left, right) = if key[a] <= key[b] { (node[a], node[b]) } else { (node[b], node[a]) };
        merges.push(Merge {
            left,
            right,
            height: dab.sqrt(),
            size: size[a] + size[b],
        });
        active[b] = false;
        node[a] = k + step;
        size[a] += size[b];
        if key[b] < key[a] {
            key[a] = key[b].clone();
        }
    }
    Ok(Dendrogram {
        ids: d.ids().to_vec(),
        merges,
    })
}

fn pair_key(key: &[String], a: usize, b: usize) -> (&str, &str) {
    let (x, y) = (key[a].as_str(), key[b].as_str());
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

impl Dendrogram {
    pub fn leaves(&self) -> usize {
        self.ids.len()
    }

    /// Children of an internal node, `None` for leaves.
    fn children(&self, node: usize) -> Option<(usize, usize)> {
        let k = self.leaves();
        (node >= k).then(|| {
            let m = &self.merges[node - k];
            (m.left, m.right)
        })
    }

    fn node_height(&self, node: usize) -> f64 {
        let k = self.leaves();
        if node < k {
            0.0
        } else {
            self.merges[node - k].height
        }
    }

    fn root(&self) -> usize {
        self.leaves() + self.merges.len() - 1
    }

    /// Checks merge count, child usage and subtree sizes.
    pub fn validate(&self) -> Result<()> {
        let k = self.leaves();
        if self.merges.len() + 1 != k {
            return Err(Error::validation(format!("{} merges for {} leaves", self.merges.len(), k)));
        }
        let mut used = vec![false; 2 * k - 1];
        let mut sizes: Vec<usize> = vec![1; k];
        for (t, m) in self.merges.iter().enumerate() {
            for c in [m.left, m.right] {
                if c >= k + t || used[c] {
                    return Err(Error::validation(format!("merge {t} reuses or forward-references node {c}")));
                }
                used[c] = true;
            }
            let s = sizes[m.left] + sizes[m.right];
            if s != m.size {
                return Err(Error::validation(format!("merge {t} has size {} but children sum to {s}", m.size)));
            }
            sizes.push(s);
        }
        Ok(())
    }

    /// Merge heights paired with the cluster count they reduce from, for
    /// choosing a cut: row `(c, h)` means the cut into `c` clusters is undone
    /// at height `h`.
    pub fn height_profile(&self) -> Vec<(usize, f64)> {
        let k = self.leaves();
        self.merges.iter().enumerate().map(|(t, m)| (k - t, m.height)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            linkage: &'a str,
            convention: &'a str,
            leaves: &'a [String],
            merges: &'a [Merge],
        }
        Ok(serde_json::to_string_pretty(&Out {
            linkage: "ward",
            convention: WARD_CONVENTION,
            leaves: &self.ids,
            merges: &self.merges,
        })?)
    }

    /// Newick text with branch lengths equal to height differences.
    pub fn to_newick(&self) -> String {
        fn label(s: &str) -> String {
            if s.chars().any(|c| "()[]':;, \t".contains(c)) {
                format!("'{}'", s.replace('\'', "''"))
            } else {
                s.to_string()
            }
        }
        fn go(d: &Dendrogram, node: usize, out: &mut String) {
            match d.children(node) {
                None => out.push_str(&label(&d.ids[node])),
                Some((l, r)) => {
                    let h = d.node_height(node);
                    out.push('(');
                    go(d, l, out);
                    let _ = write!(out, ":{:?},", h - d.node_height(l));
                    go(d, r, out);
                    let _ = write!(out, ":{:?})", h - d.node_height(r));
                }
            }
        }
        let mut out = String::new();
        go(self, self.root(), &mut out);
        out.push(';');
        out
    }
}

/// Flat partition with labels `1..=c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl Clustering {
    pub fn new(ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Size(format!("{} ids but {} labels", ids.len(), labels.len())));
        }
        let c = labels.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; c + 1];
        for &l in &labels {
            if l == 0 {
                return Err(Error::validation("cluster labels start at 1"));
            }
            seen[l] = true;
        }
        if let Some(missing) = (1..=c).find(|&l| !seen[l]) {
            return Err(Error::validation(format!("cluster label {missing} is unused")));
        }
        Ok(Clustering { ids, labels })
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of the members of each cluster, keyed by label.
    pub fn members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters()];
        for &l in &self.labels {
            s[l - 1] += 1;
        }
        s
    }

    /// Cluster labels ordered by where each first occurs in `leaf_order`.
    pub fn label_order(&self, leaf_order: &[usize]) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n_clusters());
        let mut seen = vec![false; self.n_clusters() + 1];
        for &i in leaf_order {
            let l = self.labels[i];
            if !seen[l] {
                seen[l] = true;
                order.push(l);
            }
        }
        order
    }
}

/// Undoes the last `c − 1` merges; labels follow first appearance in leaf order.
pub fn flat_cut(dend: &Dendrogram, c: usize) -> Result<Clustering> {
    let k = dend.leaves();
    if c < 1 || c > k {
        return Err(Error::Argument(format!("cluster count {c} outside 1..={k}")));
    }
    let mut parent: Vec<usize> = (0..2 * k - 1).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (t, m) in dend.merges.iter().take(k - c).enumerate() {
        let node = k + t;
        let (a, b) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[a] = node;
        parent[b] = node;
    }
    let mut label_of_root: HashMap<usize, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(k);
    for i in 0..k {
        let r = find(&mut parent, i);
        let next = label_of_root.len() + 1;
        labels.push(*label_of_root.entry(r).or_insert(next));
    }
    Clustering::new(dend.ids.clone(), labels)
}

/// Left-to-right leaf order of the tree. Each merge stores the child holding
/// the smallest id on the left, so the order depends only on the tree.
pub fn seriate(dend: &Dendrogram) -> Vec<usize> {
    let mut out = Vec::with_capacity(dend.leaves());
    let mut stack = vec![dend.root()];
    while let Some(node) = stack.pop() {
        match dend.children(node) {
            None => out.push(node),
            Some((l, r)) => {
                stack.push(r);
                stack.push(l);
            }
        }
    }
    out
}

/// Cities shared between cluster `from` in column `col` and cluster `to` in column `col + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEdge {
    pub col: usize,
    pub from: usize,
    pub to: usize,
    pub shared: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub col: usize,
    pub edges: usize,
    pub crossings: usize,
}

/// Layered contingency graph between consecutive clusterings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionGraph {
    pub names: Vec<String>,
    pub columns: Vec<Clustering>,
    /// Display order of cluster labels within each column.
    pub orders: Vec<Vec<usize>>,
    pub edges: Vec<PartitionEdge>,
    pub layers: Vec<LayerSummary>,
}

/// Compares clusterings with clusters displayed in label order.
pub fn compare_clusterings(columns: &[Clustering]) -> Result<PartitionGraph> {
    let orders = columns.iter().map(|c| (1..=c.n_clusters()).collect()).collect();
    let names = (1..=columns.len()).map(|i| format!("hc{i}")).collect();
    compare_clusterings_ordered(columns, orders, names)
}

/// Compares clusterings with an explicit per-column cluster order (e.g. the
/// order clusters appear along each dendrogram's seriation).
pub fn compare_clusterings_ordered(
    columns: &[Clustering],
    orders: Vec<Vec<usize>>,
    names: Vec<String>,
) -> Result<PartitionGraph> {
    if columns.is_empty() {
        return Err(Error::Argument("no clusterings to compare".into()));
    }
    if orders.len() != columns.len() || names.len() != columns.len() {
        return Err(Error::Size("one order and one name per clustering required".into()));
    }
    for (c, o) in columns.iter().zip(&orders) {
        let mut sorted = o.clone();
        sorted.sort_unstable();
        if sorted != (1..=c.n_clusters()).collect::<Vec<_>>() {
            return Err(Error::validation("cluster order must list every label once"));
        }
    }
    let base = &columns[0];
    let mut base_ids = base.ids.clone();
    base_ids.sort();
    for c in &columns[1..] {
        let mut ids = c.ids.clone();
        ids.sort();
        if ids != base_ids {
            return Err(Error::validation("clusterings are over different id sets"));
        }
    }

    let mut edges = Vec::new();
    let mut layers = Vec::new();
    for col in 0..columns.len().saturating_sub(1) {
        let (a, b) = (&columns[col], &columns[col + 1]);
        let label_b: HashMap<&str, usize> = b.ids.iter().map(|s| s.as_str()).zip(b.labels.iter().copied()).collect();
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (id, &la) in a.ids.iter().zip(&a.labels) {
            *counts.entry((la, label_b[id.as_str()])).or_default() += 1;
        }
        let layer: Vec<PartitionEdge> = counts
            .into_iter()
            .map(|((from, to), shared)| PartitionEdge { col, from, to, shared })
            .collect();
        let pos = |order: &[usize]| {
            let mut p = vec![0usize; order.len() + 1];
            for (i, &l) in order.iter().enumerate() {
                p[l] = i;
            }
            p
        };
        let (pa, pb) = (pos(&orders[col]), pos(&orders[col + 1]));
        let mut crossings = 0;
        for (i, e) in layer.iter().enumerate() {
            for f in &layer[i + 1..] {
                let da = pa[e.from] as i64 - pa[f.from] as i64;
                let db = pb[e.to] as i64 - pb[f.to] as i64;
                if da * db < 0 {
                    crossings += 1;
                }
            }
        }
        layers.push(LayerSummary {
            col,
            edges: layer.len(),
            crossings,
        });
        edges.extend(layer);
    }
    Ok(PartitionGraph {
        names,
        columns: columns.to_vec(),
        orders,
        edges,
        layers,
    })
}

impl PartitionGraph {
    /// Graphviz layout: one column per clustering, boxes scaled by cluster
    /// size, edges labelled with shared counts.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph partitions {\n  rankdir=LR;\n  nodesep=0.1;\n  node [shape=box, style=filled, fillcolor=\"#9ecae1\", fixedsize=true, width=0.8];\n  edge [color=\"#888888\", arrowhead=none];\n");
        let total = self.columns.first().map_or(1, |c| c.len().max(1)) as f64;
        for (col, (c, order)) in self.columns.iter().zip(&self.orders).enumerate() {
            let sizes = c.sizes();
            let _ = writeln!(s, "  subgraph cluster_{col} {{\n    label=\"{}\";\n    rank=same;", self.names[col]);
            for &l in order {
                let n = sizes[l - 1];
                let h = 0.2 + 4.0 * n as f64 / total;
                let _ = writeln!(s, "    c{col}_{l} [label=\"{l} ({n})\", height={h:.3}];");
            }
            // keep the display order top to bottom
            if order.len() > 1 {
                let chain: Vec<String> = order.iter().map(|l| format!("c{col}_{l}")).collect();
                let _ = writeln!(s, "    {} [style=invis];", chain.join(" -> "));
            }
            s.push_str("  }\n");
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  c{}_{} -> c{}_{} [label=\"{}\", penwidth={:.2}];",
                e.col,
                e.from,
                e.col + 1,
                e.to,
                e.shared,
                1.0 + 4.0 * e.shared as f64 / total
            );
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean over states of the number of distinct clusters among that state's cities.
pub fn spatial_homogeneity(c: &Clustering, state_of: &HashMap<String, String>) -> Result<f64> {
    let mut per_state: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (id, &l) in c.ids.iter().zip(&c.labels) {
        let state = state_of
            .get(id)
            .ok_or_else(|| Error::validation(format!("no state for city {id}")))?;
        per_state.entry(state.as_str()).or_default().push(l);
    }
    if per_state.is_empty() {
        return Err(Error::Size("empty clustering".into()));
    }
    let total: usize = per_state
        .values_mut()
        .map(|labels| {
            labels.sort_unstable();
            labels.dedup();
            labels.len()
        })
        .sum();
    Ok(total as f64 / per_state.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn matrix(names: &[&str], upper: &[f64]) -> DistanceMatrix {
        DistanceMatrix::from_upper(ids(names), upper).unwrap()
    }

    #[test]
    fn two_leaves_merge_at_their_distance() {
        let d = ward_linkage(&matrix(&["A", "B"], &[1.0])).unwrap();
        assert_eq!(d.merges, vec![Merge { left: 0, right: 1, height: 1.0, size: 2 }]);
    }

    #[test]
    fn three_point_worked_example() {
        // d(A,B)=1, d(A,C)=4, d(B,C)=5; merging A,B first, then
        // d²(C, AB) = ((1+1)·16 + (1+1)·25 − 1·1) / 3 = 81/3 = 27
        let d = ward_linkage(&matrix(&["A", "B", "C"], &[1.0, 4.0, 5.0])).unwrap();
        assert_eq!(d.merges[0], Merge { left: 0, right: 1, height: 1.0, size: 2 });
        assert_eq!(d.merges[1].height, 27f64.sqrt());
        assert_eq!((d.merges[1].left, d.merges[1].right, d.merges[1].size), (3, 2, 3));
    }

    #[test]
    fn equidistant_ties_follow_id_order() {
        let d = ward_linkage(&matrix(&["A", "B", "C", "D"], &[1.0; 6])).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert_eq!((d.merges[1].left, d.merges[1].right), (4, 2));
        assert_eq!((d.merges[2].left, d.merges[2].right), (5, 3));
        assert!(d.merges.iter().all(|m| m.height == 1.0));
    }

    #[test]
    fn rejects_tiny_input() {
        let one = DistanceMatrix::new(ids(&["A"]), vec![0.0]).unwrap();
        assert!(ward_linkage(&one).is_err());
    }

    #[test]
    fn flat_cut_extremes_and_order() {
        let d = ward_linkage(&matrix(&["A", "B", "C"], &[1.0, 4.0, 5.0])).unwrap();
        assert_eq!(flat_cut(&d, 3).unwrap().labels, vec![1, 2, 3]);
        assert_eq!(flat_cut(&d, 1).unwrap().labels, vec![1, 1, 1]);
        assert_eq!(flat_cut(&d, 2).unwrap().labels, vec![1, 1, 2]);
        assert!(flat_cut(&d, 0).is_err());
        assert!(flat_cut(&d, 4).is_err());
    }

    #[test]
    fn seriation_is_tree_order() {
        let d = ward_linkage(&matrix(&["A", "B"], &[1.0])).unwrap();
        assert_eq!(seriate(&d), vec![0, 1]);
        let d = ward_linkage(&matrix(&["A", "B", "C"], &[1.0, 4.0, 5.0])).unwrap();
        assert_eq!(seriate(&d), vec![0, 1, 2]);
    }

    #[test]
    fn seriation_ignores_input_order() {
        let fwd = matrix(&["A", "B", "C", "D"], &[1.0, 6.0, 7.0, 5.0, 6.5, 2.0]);
        let rev = fwd.reorder(&[3, 2, 1, 0]);
        let order_ids = |m: &DistanceMatrix| {
            let d = ward_linkage(m).unwrap();
            seriate(&d).into_iter().map(|i| d.ids[i].clone()).collect::<Vec<_>>()
        };
        assert_eq!(order_ids(&fwd), order_ids(&rev));
        assert_eq!(order_ids(&fwd), ids(&["A", "B", "C", "D"]));
    }

    #[test]
    fn newick_and_json_exports() {
        let d = ward_linkage(&matrix(&["A", "B", "C"], &[1.0, 4.0, 5.0])).unwrap();
        let h = 27f64.sqrt();
        assert_eq!(d.to_newick(), format!("((A:1.0,B:1.0):{:?},C:{:?});", h - 1.0, h));
        let json: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        assert_eq!(json["merges"].as_array().unwrap().len(), 2);
        assert_eq!(json["leaves"][2], "C");
    }

    #[test]
    fn contingency_edges() {
        let a = Clustering::new(ids(&["w", "x", "y", "z"]), vec![1, 1, 2, 2]).unwrap();
        let b = Clustering::new(ids(&["w", "x", "y", "z"]), vec![1, 2, 2, 2]).unwrap();
        let g = compare_clusterings(&[a, b]).unwrap();
        let e: Vec<(usize, usize, usize)> = g.edges.iter().map(|e| (e.from, e.to, e.shared)).collect();
        assert_eq!(e, vec![(1, 1, 1), (1, 2, 1), (2, 2, 2)]);
        assert_eq!(g.layers[0].edges, 3);
    }

    #[test]
    fn identical_clusterings_match_perfectly() {
        let a = Clustering::new(ids(&["a", "b", "c", "d", "e"]), vec![1, 2, 3, 1, 2]).unwrap();
        let g = compare_clusterings(&[a.clone(), a.clone(), a]).unwrap();
        assert_eq!(g.layers.len(), 2);
        for l in &g.layers {
            assert_eq!(l.edges, 3);
            assert_eq!(l.crossings, 0);
        }
        assert!(g.edges.iter().all(|e| e.from == e.to));
        assert!(g.to_dot().contains("c1_2 -> c2_2"));
    }

    #[test]
    fn crossings_follow_display_order() {
        let a = Clustering::new(ids(&["a", "b"]), vec![1, 2]).unwrap();
        let b = Clustering::new(ids(&["a", "b"]), vec![2, 1]).unwrap();
        let g = compare_clusterings(&[a, b]).unwrap();
        assert_eq!(g.layers[0].crossings, 1);
    }

    #[test]
    fn mismatched_ids_rejected() {
        let a = Clustering::new(ids(&["a", "b"]), vec![1, 2]).unwrap();
        let b = Clustering::new(ids(&["a", "c"]), vec![1, 2]).unwrap();
        assert!(compare_clusterings(&[a, b]).is_err());
    }

    #[test]
    fn homogeneity_examples() {
        let c = Clustering::new(ids(&["a", "b", "c", "d"]), vec![1, 1, 2, 3]).unwrap();
        let states: HashMap<String, String> =
            [("a", "S1"), ("b", "S1"), ("c", "S2"), ("d", "S2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert_eq!(spatial_homogeneity(&c, &states).unwrap(), 1.5);

        let one = Clustering::new(ids(&["a", "b", "c"]), vec![1, 1, 1]).unwrap();
        let st: HashMap<String, String> = ["a", "b", "c"].iter().map(|s| (s.to_string(), "S".to_string())).collect();
        assert_eq!(spatial_homogeneity(&one, &st).unwrap(), 1.0);

        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let own = Clustering::new(names.clone(), (1..=6).collect()).unwrap();
        let st: HashMap<String, String> = names.iter().enumerate().map(|(i, s)| (s.clone(), format!("S{}", i / 3))).collect();
        assert_eq!(spatial_homogeneity(&own, &st).unwrap(), 3.0);
    }

    fn random_matrix(k: usize, seed: u64) -> DistanceMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..k).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let names: Vec<String> = (0..k).map(|i| format!("id{i:03}")).collect();
        let upper: Vec<f64> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| crate::transport::ground_cost(&pts[i], &pts[j], 1.0))
            .collect();
        DistanceMatrix::from_upper(names, &upper).unwrap()
    }

    proptest! {
        #[test]
        fn heights_monotone_and_cuts_nested(k in 2usize..25, seed in 0u64..10_000) {
            let m = random_matrix(k, seed);
            let d = ward_linkage(&m).unwrap();
            d.validate().unwrap();
            for w in d.merges.windows(2) {
                prop_assert!(w[1].height >= w[0].height);
            }
            for c in 2..=k {
                let fine = flat_cut(&d, c).unwrap();
                let coarse = flat_cut(&d, c - 1).unwrap();
                let mut parent = HashMap::new();
                for (f, g) in fine.labels.iter().zip(&coarse.labels) {
                    prop_assert_eq!(*parent.entry(*f).or_insert(*g), *g);
                }
            }
        }

        #[test]
        fn permutation_invariant_partitions(k in 3usize..15, seed in 0u64..10_000, c in 1usize..4) {
            let m = random_matrix(k, seed);
            let perm: Vec<usize> = (0..k).rev().collect();
            let pm = m.reorder(&perm);
            let c = c.min(k);
            let a = flat_cut(&ward_linkage(&m).unwrap(), c).unwrap();
            let b = flat_cut(&ward_linkage(&pm).unwrap(), c).unwrap();
            // same partition as sets of ids
            let blocks = |x: &Clustering| {
                let mut v: Vec<Vec<String>> = x.members().values().map(|ix| {
                    let mut s: Vec<String> = ix.iter().map(|&i| x.ids[i].clone()).collect();
                    s.sort();
                    s
                }).collect();
                v.sort();
                v
            };
            prop_assert_eq!(blocks(&a), blocks(&b));
        }

        #[test]
        fn self_comparison_has_one_edge_per_cluster(labels in prop::collection::vec(1usize..5, 1..30)) {
            // compact labels into 1..=c by first appearance
            let mut map = HashMap::new();
            let labels: Vec<usize> = labels.iter().map(|l| { let n = map.len() + 1; *map.entry(*l).or_insert(n) }).collect();
            let names: Vec<String> = (0..labels.len()).map(|i| i.to_string()).collect();
            let c = Clustering::new(names, labels).unwrap();
            let g = compare_clusterings(&[c.clone(), c.clone()]).unwrap();
            prop_assert_eq!(g.edges.len(), c.n_clusters());
            let total: usize = g.edges.iter().map(|e| e.shared).sum();
            prop_assert_eq!(total, c.len());
        }
    }
}

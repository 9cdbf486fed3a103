//! Primal network simplex for the dense transportation problem.
//!
//! Supplies and demands are integers so flows stay exact; costs are `f64`.
//! The spanning tree is kept strongly feasible (every zero-flow tree arc
//! points away from the root), which rules out cycling on degenerate pivots.
//! After each pivot the parent/depth/potential arrays are rebuilt from the
//! tree adjacency lists, O(n + m) per pivot.

use crate::error::{Error, Result};

const ROOT_SENTINEL: usize = usize::MAX;

struct Simplex<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64],
    art_cost: f64,
    flow: Vec<i64>,
    in_tree: Vec<bool>,
    // per node, root is node n + m
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adj: Vec<Vec<usize>>,
    next_arc: usize,
    block: usize,
    tol: f64,
}

impl<'a> Simplex<'a> {
    fn real_arcs(&self) -> usize {
        self.n * self.m
    }

    fn root(&self) -> usize {
        self.n + self.m
    }

    fn endpoints(&self, e: usize) -> (usize, usize) {
        let real = self.real_arcs();
        if e < real {
            (e / self.m, self.n + e % self.m)
        } else {
            let u = e - real;
            if u < self.n {
                (u, self.root())
            } else {
                (self.root(), u)
            }
        }
    }

    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.real_arcs() {
            self.cost[e]
        } else if e - self.real_arcs() < self.n {
            0.0
        } else {
            self.art_cost
        }
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        let (s, t) = self.endpoints(e);
        self.arc_cost(e) + self.pi[s] - self.pi[t]
    }

    fn rebuild(&mut self) {
        let root = self.root();
        let mut stack = vec![root];
        self.parent[root] = ROOT_SENTINEL;
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        while let Some(u) = stack.pop() {
            for k in 0..self.adj[u].len() {
                let e = self.adj[u][k];
                if self.parent[u] != ROOT_SENTINEL && self.pred[u] == e {
                    continue;
                }
                let (s, t) = self.endpoints(e);
                let (v, up) = if s == u { (t, false) } else { (s, true) };
                self.parent[v] = u;
                self.pred[v] = e;
                self.pred_up[v] = up;
                self.depth[v] = self.depth[u] + 1;
                let c = self.arc_cost(e);
                self.pi[v] = if up { self.pi[u] - c } else { self.pi[u] + c };
                stack.push(v);
            }
        }
    }

    /// Block search pricing: most negative reduced cost within the first
    /// block containing any eligible arc.
    fn find_entering(&mut self) -> Option<usize> {
        let total = self.in_tree.len();
        let mut best = None;
        let mut best_rc = -self.tol;
        let mut scanned_in_block = 0;
        for k in 0..total {
            let e = (self.next_arc + k) % total;
            if !self.in_tree[e] {
                let rc = self.reduced_cost(e);
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(e);
                }
            }
            scanned_in_block += 1;
            if scanned_in_block >= self.block {
                if best.is_some() {
                    self.next_arc = (e + 1) % total;
                    return best;
                }
                scanned_in_block = 0;
            }
        }
        if let Some(e) = best {
            self.next_arc = (e + 1) % total;
        }
        best
    }

    fn pivot(&mut self, entering: usize) {
        // Entering arcs are at their lower bound, so flow runs source -> target.
        let (first, second) = self.endpoints(entering);
        let (mut a, mut b) = (first, second);
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        let join = a;

        let mut delta = i64::MAX;
        let mut leaving_node = None;
        let mut u = first;
        while u != join {
            let d = if self.pred_up[u] { self.flow[self.pred[u]] } else { i64::MAX };
            if d < delta {
                delta = d;
                leaving_node = Some(u);
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            let d = if self.pred_up[u] { i64::MAX } else { self.flow[self.pred[u]] };
            if d <= delta {
                delta = d;
                leaving_node = Some(u);
            }
            u = self.parent[u];
        }
        let leaving_node = leaving_node.expect("bounded problem has a blocking arc");

        if delta > 0 {
            self.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        let leaving = self.pred[leaving_node];
        let (ls, lt) = self.endpoints(leaving);
        self.adj[ls].retain(|&x| x != leaving);
        self.adj[lt].retain(|&x| x != leaving);
        self.in_tree[leaving] = false;
        let (es, et) = self.endpoints(entering);
        self.adj[es].push(entering);
        self.adj[et].push(entering);
        self.in_tree[entering] = true;
        self.rebuild();
    }
}

/// Solves `min Σ c_ij x_ij` subject to row sums `supply`, column sums
/// `demand`, `x ≥ 0`. Returns the optimal integer flows, row-major `n × m`.
pub fn solve_transportation(supply: &[i64], demand: &[i64], cost: &[f64]) -> Result<Vec<i64>> {
    let (n, m) = (supply.len(), demand.len());
    if n == 0 || m == 0 {
        return Err(Error::Size("transportation problem needs at least one source and one sink".into()));
    }
    if cost.len() != n * m {
        return Err(Error::Size(format!("cost has {} entries, expected {}", cost.len(), n * m)));
    }
    if supply.iter().chain(demand).any(|&s| s <= 0) {
        return Err(Error::validation("supplies and demands must be positive"));
    }
    if supply.iter().sum::<i64>() != demand.iter().sum::<i64>() {
        return Err(Error::validation("total supply differs from total demand"));
    }
    let max_cost = cost.iter().fold(0.0f64, |acc, &c| {
        if c.is_finite() {
            acc.max(c.abs())
        } else {
            f64::INFINITY
        }
    });
    if !max_cost.is_finite() {
        return Err(Error::validation("non-finite transport cost"));
    }

    let nodes = n + m + 1;
    let real = n * m;
    let arcs = real + n + m;
    let art_cost = (n + m) as f64 * max_cost + 1.0;
    let mut s = Simplex {
        n,
        m,
        cost,
        art_cost,
        flow: vec![0; arcs],
        in_tree: vec![false; arcs],
        parent: vec![0; nodes],
        pred: vec![0; nodes],
        pred_up: vec![false; nodes],
        depth: vec![0; nodes],
        pi: vec![0.0; nodes],
        adj: vec![Vec::new(); nodes],
        next_arc: 0,
        block: ((arcs as f64).sqrt().ceil() as usize).max(10),
        tol: 1e-12 * (1.0 + art_cost),
    };
    for u in 0..n + m {
        let e = real + u;
        s.flow[e] = if u < n { supply[u] } else { demand[u - n] };
        s.in_tree[e] = true;
        s.adj[u].push(e);
        s.adj[n + m].push(e);
    }
    s.rebuild();

    let max_pivots = 50 * arcs + 1000;
    let mut pivots = 0;
    while let Some(e) = s.find_entering() {
        s.pivot(e);
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NonConvergence(format!("network simplex exceeded {max_pivots} pivots")));
        }
    }
    if s.flow[real..].iter().any(|&f| f != 0) {
        return Err(Error::NonConvergence("artificial arcs carry flow at optimum".into()));
    }
    s.flow.truncate(real);
    Ok(s.flow)
}

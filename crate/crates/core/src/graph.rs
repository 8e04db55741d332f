//! Communication graphs: static construction, time-varying sampling plans,
//! incidence and Laplacian matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A simple graph on nodes `0..node_count`.
///
/// Undirected edges are stored as `(i, j)` with `i < j`. Directed edges
/// `(i, j)` mean that `i` sends to `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    directed: bool,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    directed: bool,
}

impl TryFrom<GraphRepr> for Graph {
    type Error = Error;
    fn try_from(r: GraphRepr) -> Result<Self> {
        Graph::new(r.node_count, r.edges, r.directed)
    }
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr { node_count: g.node_count, edges: g.edges, directed: g.directed }
    }
}

impl Graph {
    /// Builds a graph, normalising undirected pairs to `i < j`.
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>, directed: bool) -> Result<Self> {
        if node_count == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        let mut seen = BTreeSet::new();
        let mut stored = Vec::with_capacity(edges.len());
        for (i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(invalid(format!("edge ({i}, {j}) out of range for {node_count} nodes")));
            }
            if i == j {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            let e = if directed { (i, j) } else { (i.min(j), i.max(j)) };
            if !seen.insert(e) {
                return Err(invalid(format!("duplicate edge ({i}, {j})")));
            }
            stored.push(e);
        }
        Ok(Self::from_checked(node_count, stored, directed))
    }

    fn from_checked(node_count: usize, edges: Vec<(usize, usize)>, directed: bool) -> Self {
        let mut out_adj = vec![Vec::new(); node_count];
        let mut in_adj = vec![Vec::new(); node_count];
        for &(i, j) in &edges {
            out_adj[i].push(j);
            in_adj[j].push(i);
            if !directed {
                out_adj[j].push(i);
                in_adj[i].push(j);
            }
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
        }
        Graph { node_count, edges, directed, out_adj, in_adj }
    }

    pub fn complete(node_count: usize) -> Self {
        let edges = (0..node_count).flat_map(|i| (i + 1..node_count).map(move |j| (i, j))).collect();
        Self::from_checked(node_count, edges, false)
    }

    pub fn path(node_count: usize) -> Self {
        let edges = (1..node_count).map(|i| (i - 1, i)).collect();
        Self::from_checked(node_count, edges, false)
    }

    pub fn cycle(node_count: usize) -> Result<Self> {
        if node_count < 3 {
            return Err(invalid("a cycle needs at least 3 nodes"));
        }
        Graph::new(node_count, (0..node_count).map(|i| (i, (i + 1) % node_count)).collect(), false)
    }

    /// Random connected undirected graph: a Hamiltonian cycle over a random
    /// node order plus `edge_count - node_count` extra edges drawn uniformly
    /// without replacement from the remaining pairs.
    pub fn small_world(node_count: usize, edge_count: usize, seed: u64) -> Result<Self> {
        if node_count < 3 {
            return Err(invalid("small_world needs at least 3 nodes"));
        }
        let max_edges = node_count * (node_count - 1) / 2;
        if edge_count < node_count || edge_count > max_edges {
            return Err(invalid(format!("edge_count {edge_count} outside [{node_count}, {max_edges}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..node_count).collect();
        order.shuffle(&mut rng);
        let mut chosen = BTreeSet::new();
        for k in 0..node_count {
            let (a, b) = (order[k], order[(k + 1) % node_count]);
            chosen.insert((a.min(b), a.max(b)));
        }
        let rest: Vec<(usize, usize)> = (0..node_count)
            .flat_map(|i| (i + 1..node_count).map(move |j| (i, j)))
            .filter(|e| !chosen.contains(e))
            .collect();
        let extra = edge_count - node_count;
        for k in index::sample(&mut rng, rest.len(), extra) {
            chosen.insert(rest[k]);
        }
        Ok(Self::from_checked(node_count, chosen.into_iter().collect(), false))
    }

    /// The 12-node, 24-edge directed graph used in the directed-network
    /// ellipsoid experiment.
    pub fn paper_directed() -> Self {
        const ARCS: [(usize, usize); 24] = [
            (1, 10),
            (1, 6),
            (8, 1),
            (8, 10),
            (8, 6),
            (6, 8),
            (6, 3),
            (11, 1),
            (9, 11),
            (9, 3),
            (9, 5),
            (4, 9),
            (4, 11),
            (7, 4),
            (7, 12),
            (7, 6),
            (2, 10),
            (12, 6),
            (12, 2),
            (12, 5),
            (3, 12),
            (5, 3),
            (10, 7),
            (10, 5),
        ];
        let edges = ARCS.iter().map(|&(i, j)| (i - 1, j - 1)).collect();
        Self::from_checked(12, edges, true)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Neighbours of `i` in an undirected graph (out-neighbours if directed).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.out_adj[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_adj[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    /// Undirected degree, or out-degree for directed graphs.
    pub fn degree(&self, i: usize) -> usize {
        self.out_adj[i].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    /// Connectivity for undirected graphs, strong connectivity for directed.
    pub fn is_connected(&self) -> bool {
        let reach = |adj: &[Vec<usize>]| {
            let mut seen = vec![false; self.node_count];
            let mut queue = VecDeque::from([0]);
            seen[0] = true;
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(&self.out_adj) && (!self.directed || reach(&self.in_adj))
    }

    /// Union of edge sets over graphs on the same node set.
    pub fn union<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<Graph> {
        let mut it = graphs.into_iter().peekable();
        let first = it.peek().ok_or_else(|| invalid("union of no graphs"))?;
        let (n, directed) = (first.node_count, first.directed);
        let mut set = BTreeSet::new();
        for g in it {
            if g.node_count != n || g.directed != directed {
                return Err(invalid("union over incompatible graphs"));
            }
            set.extend(g.edges.iter().copied());
        }
        Ok(Self::from_checked(n, set.into_iter().collect(), directed))
    }

    fn require_undirected(&self) -> Result<()> {
        if self.directed {
            Err(Error::GraphKind { expected: "undirected" })
        } else {
            Ok(())
        }
    }

    /// Oriented edge-node incidence matrix: row per edge `(i, j)` with +1 at
    /// `i` and -1 at `j`.
    pub fn incidence(&self) -> Result<DMatrix<f64>> {
        self.require_undirected()?;
        let mut h = DMatrix::zeros(self.edges.len(), self.node_count);
        for (r, &(i, j)) in self.edges.iter().enumerate() {
            h[(r, i)] = 1.0;
            h[(r, j)] = -1.0;
        }
        Ok(h)
    }

    pub fn laplacian(&self) -> Result<DMatrix<f64>> {
        self.require_undirected()?;
        let n = self.node_count;
        let mut l = DMatrix::zeros(n, n);
        for &(i, j) in &self.edges {
            l[(i, j)] = -1.0;
            l[(j, i)] = -1.0;
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
        }
        Ok(l)
    }

    /// Edge-list text: a header `N E directed` followed by 1-indexed pairs.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{} {} {}\n", self.node_count, self.edges.len(), self.directed);
        for &(i, j) in &self.edges {
            let _ = writeln!(s, "{} {}", i + 1, j + 1);
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty edge list".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad header `{header}`")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
        let n = parse(parts[0])?;
        let e = parse(parts[1])?;
        let directed = match parts[2] {
            "true" | "1" | "directed" => true,
            "false" | "0" | "undirected" => false,
            other => return Err(Error::Format(format!("bad directed flag `{other}`"))),
        };
        let mut edges = Vec::with_capacity(e);
        for line in lines {
            let pair: Vec<&str> = line.split_whitespace().collect();
            if pair.len() != 2 {
                return Err(Error::Format(format!("bad edge line `{line}`")));
            }
            let (i, j) = (parse(pair[0])?, parse(pair[1])?);
            if i == 0 || j == 0 {
                return Err(Error::Format("edge list is 1-indexed".into()));
            }
            edges.push((i - 1, j - 1));
        }
        if edges.len() != e {
            return Err(Error::Format(format!("header says {e} edges, found {}", edges.len())));
        }
        Graph::new(n, edges, directed)
    }
}

/// Smallest strictly positive eigenvalue of a symmetric PSD matrix whose
/// kernel is one-dimensional (a connected-graph Laplacian).
pub fn lambda2(psd: &DMatrix<f64>) -> Result<f64> {
    if psd.nrows() != psd.ncols() {
        return Err(Error::DimensionMismatch { expected: psd.nrows(), got: psd.ncols() });
    }
    if psd.nrows() == 1 {
        return Err(invalid("lambda2 of a 1x1 matrix is undefined"));
    }
    let mut eig = SymmetricEigen::new(psd.clone()).eigenvalues.as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    let top = eig.last().copied().unwrap_or(0.0).abs();
    let tol = 1e-9 * top.max(f64::MIN_POSITIVE);
    let zeros = eig.iter().filter(|v| v.abs() <= tol).count();
    if zeros > 1 || top == 0.0 {
        return Err(Error::Disconnected);
    }
    eig.into_iter().find(|&v| v > tol).ok_or(Error::Disconnected)
}

/// Recipe for a time-varying sequence `{G^t}` built from a base graph.
///
/// Within each window of `window_length` graphs the first `M - 1` slots carry
/// `ceil(p |E|)` base edges sampled uniformly without replacement, and the
/// final slot carries every base edge the window has not yet used, so each
/// window's union is the base graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeVaryingGraphPlan {
    pub base: Graph,
    pub window_length: usize,
    pub sample_fraction: f64,
    pub seed: u64,
    /// When set, `G^0` is the base graph and windows start at `t = 1`.
    pub base_first: bool,
}

impl TimeVaryingGraphPlan {
    pub fn new(base: Graph, window_length: usize, sample_fraction: f64, seed: u64) -> Result<Self> {
        if window_length == 0 {
            return Err(invalid("window_length must be positive"));
        }
        if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
            return Err(invalid(format!("sample_fraction {sample_fraction} outside (0, 1]")));
        }
        Ok(Self { base, window_length, sample_fraction, seed, base_first: true })
    }

    pub fn with_base_first(mut self, on: bool) -> Self {
        self.base_first = on;
        self
    }

    pub fn node_count(&self) -> usize {
        self.base.node_count()
    }

    /// Number of edges in each sampled (non-final) slot.
    pub fn sample_size(&self) -> usize {
        let raw = self.sample_fraction * self.base.edge_count() as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.base.edge_count())
    }

    /// Maps a graph index `t` to `(window, slot)`, or `None` for the leading
    /// base graph.
    pub fn position(&self, t: usize) -> Option<(usize, usize)> {
        let s = if self.base_first { t.checked_sub(1)? } else { t };
        Some((s / self.window_length, s % self.window_length))
    }

    /// All graphs of one window, in slot order.
    pub fn window(&self, window: usize) -> Vec<Graph> {
        let base = &self.base;
        let m = self.window_length;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(window as u64);
        let count = self.sample_size();
        let mut covered = vec![false; base.edge_count()];
        let mut out = Vec::with_capacity(m);
        for _ in 0..m.saturating_sub(1) {
            let mut picks = index::sample(&mut rng, base.edge_count(), count).into_vec();
            picks.sort_unstable();
            for &p in &picks {
                covered[p] = true;
            }
            let edges = picks.into_iter().map(|p| base.edges[p]).collect();
            out.push(Graph::from_checked(base.node_count, edges, base.directed));
        }
        let rest = (0..base.edge_count()).filter(|&p| !covered[p]).map(|p| base.edges[p]).collect();
        out.push(Graph::from_checked(base.node_count, rest, base.directed));
        out
    }

    /// The graph `G^t`; deterministic in `(plan, t)`.
    pub fn sample(&self, t: usize) -> Graph {
        match self.position(t) {
            None => self.base.clone(),
            Some((w, slot)) => self.window(w).swap_remove(slot),
        }
    }
}

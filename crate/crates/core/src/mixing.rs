//! One-round mixing matrices and multi-round approximate averaging.
//!
//! Every evaluator advances node state one communication round at a time
//! through a [`Messenger`], so a node only ever reads values sent by its
//! current in-neighbours and rounds are counted exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Blocks};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, TimeVaryingGraphPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Metropolis,
    DirectedPushsum,
}

impl MixingKind {
    /// The mixing rule that fits a graph's orientation.
    pub fn for_graph(g: &Graph) -> Self {
        if g.is_directed() {
            MixingKind::DirectedPushsum
        } else {
            MixingKind::Metropolis
        }
    }
}

/// One communication round `V^t`.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub entries: DMatrix<f64>,
    pub kind: MixingKind,
    graph: Graph,
    /// Row `i` as `(j, V_ij)` over the in-neighbours of `i` (self excluded).
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn self_weight(&self, i: usize) -> f64 {
        self.entries[(i, i)]
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    fn from_dense(graph: &Graph, entries: DMatrix<f64>, kind: MixingKind) -> Self {
        let rows = (0..graph.node_count())
            .map(|i| graph.in_neighbors(i).iter().map(|&j| (j, entries[(i, j)])).collect())
            .collect();
        MixingMatrix { entries, kind, graph: graph.clone(), rows }
    }
}

/// Metropolis weights `V_ij = 1/(max{d_i, d_j} + 1)`.
pub fn metropolis_weights(graph: &Graph) -> Result<MixingMatrix> {
    if graph.is_directed() {
        return Err(Error::GraphKind { expected: "undirected" });
    }
    let n = graph.node_count();
    let mut v = DMatrix::zeros(n, n);
    for &(i, j) in graph.edges() {
        let w = 1.0 / (graph.degree(i).max(graph.degree(j)) as f64 + 1.0);
        v[(i, j)] = w;
        v[(j, i)] = w;
    }
    for i in 0..n {
        let off: f64 = graph.neighbors(i).iter().map(|&j| v[(i, j)]).sum();
        v[(i, i)] = 1.0 - off;
    }
    Ok(MixingMatrix::from_dense(graph, v, MixingKind::Metropolis))
}

/// Column-stochastic push-sum weights: column `j` puts `1/(d_j + 1)` on `j`
/// and on each out-neighbour of `j`.
pub fn directed_weights(graph: &Graph) -> Result<MixingMatrix> {
    if !graph.is_directed() {
        return Err(Error::GraphKind { expected: "directed" });
    }
    let n = graph.node_count();
    let mut v = DMatrix::zeros(n, n);
    for j in 0..n {
        let w = 1.0 / (graph.out_neighbors(j).len() as f64 + 1.0);
        v[(j, j)] = w;
        for &i in graph.out_neighbors(j) {
            v[(i, j)] = w;
        }
    }
    Ok(MixingMatrix::from_dense(graph, v, MixingKind::DirectedPushsum))
}

pub fn weights(graph: &Graph, kind: MixingKind) -> Result<MixingMatrix> {
    match kind {
        MixingKind::Metropolis => metropolis_weights(graph),
        MixingKind::DirectedPushsum => directed_weights(graph),
    }
}

/// Synchronous message delivery with round counting and an optional access
/// log of `(round, receiver, sender)` triples.
#[derive(Debug, Default, Clone)]
pub struct Messenger {
    rounds: usize,
    log: Option<Vec<(usize, usize, usize)>>,
}

impl Messenger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log() -> Self {
        Messenger { rounds: 0, log: Some(Vec::new()) }
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn log(&self) -> Option<&[(usize, usize, usize)]> {
        self.log.as_deref()
    }

    /// One round over `graph`: node `i` receives `outgoing[j]` from every
    /// in-neighbour `j`. The inbox is the only view a node gets of others.
    pub fn round<'a, M>(&mut self, graph: &Graph, outgoing: &'a [M]) -> Vec<Vec<(usize, &'a M)>> {
        let round = self.rounds;
        self.rounds += 1;
        (0..graph.node_count())
            .map(|i| {
                graph
                    .in_neighbors(i)
                    .iter()
                    .map(|&j| {
                        if let Some(log) = self.log.as_mut() {
                            log.push((round, i, j));
                        }
                        (j, &outgoing[j])
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_blocks(seq_nodes: usize, omega: &[DVector<f64>]) -> Result<()> {
    if omega.len() != seq_nodes {
        return Err(Error::DimensionMismatch { expected: seq_nodes, got: omega.len() });
    }
    if let Some(first) = omega.first() {
        if let Some(bad) = omega.iter().find(|b| b.len() != first.len()) {
            return Err(Error::DimensionMismatch { expected: first.len(), got: bad.len() });
        }
    }
    Ok(())
}

/// `(V^{t+q} ... V^{t+1} (x) I_n) omega` via `q` rounds of neighbour averaging.
pub fn approx_average_undirected(
    sequence: &[MixingMatrix],
    omega: &[DVector<f64>],
    messenger: &mut Messenger,
) -> Result<Blocks> {
    let mut z = omega.to_vec();
    for v in sequence {
        if v.kind != MixingKind::Metropolis {
            return Err(invalid("approx_average_undirected needs Metropolis matrices"));
        }
        check_blocks(v.graph.node_count(), &z)?;
        let inbox = messenger.round(&v.graph, &z);
        z = inbox
            .iter()
            .enumerate()
            .map(|(i, msgs)| {
                // z_i + sum_j V_ij (z_j - z_i): rows sum to one, and consensus
                // inputs come back bit-for-bit.
                let mut acc = z[i].clone();
                for (&(j, w), &(from, zj)) in v.rows[i].iter().zip(msgs) {
                    debug_assert_eq!(j, from);
                    acc.axpy(w, &(zj - &z[i]), 1.0);
                }
                acc
            })
            .collect();
    }
    Ok(z)
}

/// Push-sum ratio `diag(W 1)^{-1} (W (x) I_n) omega` with fresh unit weights.
pub fn push_sum(sequence: &[MixingMatrix], omega: &[DVector<f64>], messenger: &mut Messenger) -> Result<Blocks> {
    let mut z = omega.to_vec();
    let mut w = vec![1.0; omega.len()];
    for v in sequence {
        if v.kind != MixingKind::DirectedPushsum {
            return Err(invalid("push_sum needs directed push-sum matrices"));
        }
        check_blocks(v.graph.node_count(), &z)?;
        let outgoing: Vec<(&DVector<f64>, f64)> = z.iter().zip(&w).map(|(a, &b)| (a, b)).collect();
        let inbox = messenger.round(&v.graph, &outgoing);
        let (mut nz, mut nw) = (Vec::with_capacity(z.len()), Vec::with_capacity(z.len()));
        for (i, msgs) in inbox.iter().enumerate() {
            let a = v.self_weight(i);
            let mut zi = &z[i] * a;
            let mut wi = w[i] * a;
            for (&(_, vij), &(_, &(zj, wj))) in v.rows[i].iter().zip(msgs) {
                zi.axpy(vij, zj, 1.0);
                wi += vij * wj;
            }
            nz.push(zi);
            nw.push(wi);
        }
        z = nz;
        w = nw;
    }
    for (i, (zi, &wi)) in z.iter_mut().zip(&w).enumerate() {
        if wi < 1e-300 {
            return Err(Error::DegenerateWeight { node: i, weight: wi });
        }
        *zi /= wi;
    }
    Ok(z)
}

/// Every block replaced by the mean of all blocks (`P_C`).
pub fn exact_average(omega: &[DVector<f64>]) -> Blocks {
    blocks::replicate(omega.len(), &blocks::mean(omega))
}

/// Diagnostic wrapper around one `R^k` evaluation.
#[derive(Debug, Clone)]
pub struct AveragingReport {
    pub output: Blocks,
    pub rounds_used: usize,
    pub residual_vs_exact: Option<f64>,
}

/// Where the per-round graphs come from.
#[derive(Debug, Clone)]
pub enum GraphSource {
    Static(Graph),
    Plan(TimeVaryingGraphPlan),
}

impl GraphSource {
    pub fn node_count(&self) -> usize {
        match self {
            GraphSource::Static(g) => g.node_count(),
            GraphSource::Plan(p) => p.node_count(),
        }
    }

    pub fn base(&self) -> &Graph {
        match self {
            GraphSource::Static(g) => g,
            GraphSource::Plan(p) => &p.base,
        }
    }
}

/// A communication clock over a graph source: `average` consumes the next
/// `q` graphs `G^{t+1}, ..., G^{t+q}` and advances `t` by `q`.
#[derive(Debug, Clone)]
pub struct CommNetwork {
    source: GraphSource,
    kind: MixingKind,
    clock: usize,
    messenger: Messenger,
    static_matrix: Option<MixingMatrix>,
    window_cache: Option<(usize, Vec<MixingMatrix>)>,
}

impl CommNetwork {
    pub fn new(source: GraphSource, kind: MixingKind) -> Result<Self> {
        if source.base().is_directed() != (kind == MixingKind::DirectedPushsum) {
            return Err(invalid(format!(
                "mixing kind {kind:?} does not match a {} graph",
                if source.base().is_directed() { "directed" } else { "undirected" }
            )));
        }
        let static_matrix = match &source {
            GraphSource::Static(g) => Some(weights(g, kind)?),
            GraphSource::Plan(_) => None,
        };
        Ok(CommNetwork { source, kind, clock: 0, messenger: Messenger::new(), static_matrix, window_cache: None })
    }

    pub fn with_clock(mut self, t: usize) -> Self {
        self.clock = t;
        self
    }

    pub fn with_access_log(mut self) -> Self {
        self.messenger = Messenger::with_log();
        self
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    pub fn source(&self) -> &GraphSource {
        &self.source
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn messenger(&self) -> &Messenger {
        &self.messenger
    }

    /// The mixing matrix of graph `G^t`.
    pub fn matrix_at(&mut self, t: usize) -> MixingMatrix {
        if let Some(m) = &self.static_matrix {
            return m.clone();
        }
        let GraphSource::Plan(plan) = &self.source else { unreachable!() };
        let Some((w, slot)) = plan.position(t) else {
            return weights(&plan.base, self.kind).expect("kind checked at construction");
        };
        if self.window_cache.as_ref().map(|c| c.0) != Some(w) {
            let mats =
                plan.window(w).iter().map(|g| weights(g, self.kind).expect("kind checked at construction")).collect();
            self.window_cache = Some((w, mats));
        }
        self.window_cache.as_ref().unwrap().1[slot].clone()
    }

    /// `R(omega)` over the next `rounds` graphs.
    pub fn average(&mut self, omega: &[DVector<f64>], rounds: usize) -> Result<AveragingReport> {
        let seq: Vec<MixingMatrix> = (1..=rounds).map(|s| self.matrix_at(self.clock + s)).collect();
        self.clock += rounds;
        let output = match self.kind {
            MixingKind::Metropolis => approx_average_undirected(&seq, omega, &mut self.messenger)?,
            MixingKind::DirectedPushsum => push_sum(&seq, omega, &mut self.messenger)?,
        };
        Ok(AveragingReport { output, rounds_used: rounds, residual_vs_exact: None })
    }

    /// As [`average`](Self::average), also filling the residual against `P_C`.
    pub fn average_with_residual(&mut self, omega: &[DVector<f64>], rounds: usize) -> Result<AveragingReport> {
        let mut rep = self.average(omega, rounds)?;
        rep.residual_vs_exact = Some(blocks::dist(&rep.output, &exact_average(omega)));
        Ok(rep)
    }
}

/// Fitted constants of the geometric bound `||R(w) - P_C(w)|| <= N Gamma beta^q ||w||`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayEstimate {
    pub gamma: f64,
    pub beta: f64,
}

impl DecayEstimate {
    pub fn bound(&self, nodes: usize, rounds: usize) -> f64 {
        nodes as f64 * self.gamma * self.beta.powi(rounds as i32)
    }
}

/// Worst-case relative residual after `q = 1..=q_max` rounds over random
/// non-consensus unit inputs, each trial starting at a random clock offset.
pub fn decay_profile(
    source: &GraphSource,
    kind: MixingKind,
    q_max: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let nodes = source.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = match source {
        GraphSource::Static(_) => 1,
        GraphSource::Plan(p) => 4 * p.window_length,
    };
    let mut worst = vec![0.0f64; q_max];
    for _ in 0..trials {
        let omega = loop {
            let raw: Vec<DVector<f64>> =
                (0..nodes).map(|_| DVector::from_element(1, rng.sample::<f64, _>(StandardNormal))).collect();
            let centered = blocks::sub(&raw, &exact_average(&raw));
            let nrm = blocks::norm(&centered);
            if nrm > 1e-8 {
                break raw.iter().map(|b| b / blocks::norm(&raw)).collect::<Blocks>();
            }
        };
        let exact = exact_average(&omega);
        let offset = rng.random_range(0..period);
        let mut net = CommNetwork::new(source.clone(), kind)?.with_clock(offset);
        // Carry the running push-sum state across rounds so one pass yields
        // every prefix length.
        let mut z = omega.clone();
        let mut w = vec![1.0; nodes];
        for slot in worst.iter_mut() {
            let v = net.matrix_at(net.clock + 1);
            net.clock += 1;
            let zn = v.entries.clone() * DMatrix::from_fn(nodes, 1, |i, _| z[i][0]);
            let wn = &v.entries * DVector::from_column_slice(&w);
            z = (0..nodes).map(|i| DVector::from_element(1, zn[(i, 0)])).collect();
            w = wn.as_slice().to_vec();
            let est: Blocks = match kind {
                MixingKind::Metropolis => z.clone(),
                MixingKind::DirectedPushsum => z.iter().zip(&w).map(|(a, &b)| a / b).collect(),
            };
            *slot = slot.max(blocks::dist(&est, &exact));
        }
    }
    Ok(worst)
}

/// Least-squares fit of `log r_q` against `q` over the decay profile.
pub fn estimate_decay(
    source: &GraphSource,
    kind: MixingKind,
    q_max: usize,
    trials: usize,
    seed: u64,
) -> Result<DecayEstimate> {
    if q_max < 2 || trials == 0 {
        return Err(invalid("estimate_decay needs q_max >= 2 and trials >= 1"));
    }
    let profile = decay_profile(source, kind, q_max, trials, seed)?;
    fit_decay(&profile, source.node_count())
}

/// Fits `(Gamma, beta)` to residuals `r[q-1]` measured after `q` rounds.
pub fn fit_decay(profile: &[f64], nodes: usize) -> Result<DecayEstimate> {
    const FLOOR: f64 = 1e-12;
    let n = nodes as f64;
    let pts: Vec<(f64, f64)> =
        profile.iter().enumerate().filter(|(_, &r)| r > FLOOR).map(|(q, &r)| ((q + 1) as f64, r.ln())).collect();
    if pts.len() < 2 {
        // One round already reaches round-off: report the first residual.
        let beta = profile.first().copied().unwrap_or(0.0).clamp(f64::EPSILON, 1.0 - 1e-12);
        return Ok(DecayEstimate { gamma: 1.0 / n, beta });
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::NoDecay { slope });
    }
    let beta = slope.exp().clamp(f64::MIN_POSITIVE, 1.0 - 1e-12);
    let gamma = profile
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > FLOOR)
        .map(|(q, &r)| r / (n * beta.powi(q as i32 + 1)))
        .fold(0.0, f64::max);
    Ok(DecayEstimate { gamma, beta })
}

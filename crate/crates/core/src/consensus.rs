//! Average consensus over an undirected agent graph, in the plain
//! accelerated form and with decaying privacy noise.
//!
//! Every iteration is a synchronous round: each agent broadcasts its current
//! iterate to its one-hop neighbours, then all agents update at once from
//! what they received. Observers (the message ledger, convergence traces)
//! attach through [`RoundHook`].

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Undirected communication graph over agents `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Consensus(format!(
                    "edge ({a}, {b}) outside {n} agents"
                )));
            }
            if a == b {
                return Err(Error::Consensus(format!("self-loop on agent {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            n,
            edges,
            adjacency,
        })
    }

    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::new(n, edges).expect("ring edges are valid")
    }

    pub fn line(n: usize) -> Self {
        Self::new(n, (1..n).map(|i| (i - 1, i))).expect("line edges are valid")
    }

    pub fn complete(n: usize) -> Self {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
            .expect("complete edges are valid")
    }

    pub fn star(n: usize) -> Self {
        Self::new(n, (1..n).map(|i| (0, i))).expect("star edges are valid")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.adjacency[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.adjacency[agent].len()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        self.bfs_tree(0).len() == self.n
    }

    /// Breadth-first (parent, child) edges from `root`, in visiting order.
    fn bfs_tree(&self, root: usize) -> Vec<(Option<usize>, usize, usize)> {
        let mut seen = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        let mut queue = VecDeque::from([(None, root, 0)]);
        seen[root] = true;
        while let Some((parent, node, depth)) = queue.pop_front() {
            order.push((parent, node, depth));
            for &m in &self.adjacency[node] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back((Some(node), m, depth + 1));
                }
            }
        }
        order
    }
}

/// Metropolis–Hastings weights: `1/(1+max(deg_n, deg_m))` on each edge and
/// the remainder on the diagonal.
pub fn metropolis_weights(topology: &Topology) -> Result<DMatrix<f64>> {
    if !topology.is_connected() {
        return Err(Error::DisconnectedTopology);
    }
    let n = topology.len();
    let mut w = DMatrix::zeros(n, n);
    for &(a, b) in topology.edges() {
        let v = 1.0 / (1.0 + topology.degree(a).max(topology.degree(b)) as f64);
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusConfig {
    /// Mixing weight of the predictor; `None` picks the value minimising
    /// the contraction factor for the given weight matrix.
    pub beta: Option<f64>,
    pub eta1: f64,
    pub eta2: f64,
    pub stop_tol: f64,
    pub max_iters: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            beta: None,
            eta1: 2.0,
            eta2: -1.0,
            stop_tol: 1e-10,
            max_iters: 20_000,
            sigma: 0.0,
            gamma: 0.4,
            seed: 0,
        }
    }
}

impl ConsensusConfig {
    pub fn with_noise(mut self, sigma: f64, gamma: f64) -> Self {
        self.sigma = sigma;
        self.gamma = gamma;
        self
    }

    fn validate(&self) -> Result<()> {
        if ((self.eta1 + self.eta2) - 1.0).abs() > 1e-12 {
            return Err(Error::Consensus(format!(
                "predictor weights sum to {}, expected 1",
                self.eta1 + self.eta2
            )));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::Consensus("stop_tol must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Consensus(format!(
                "noise scale {} invalid",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Consensus(format!(
                "noise decay {} not in [0, 1)",
                self.gamma
            )));
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Consensus(format!("beta {b} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Observer of the simulated network.
pub trait RoundHook {
    /// Called once per consensus round with the iterate every agent
    /// broadcasts to its neighbours in that round.
    fn on_round(&mut self, _round: usize, _sent: &[Vec<f64>]) {}

    /// Called for each point-to-point forward of a finished result.
    fn on_relay(&mut self, _round: usize, _from: usize, _to: usize, _payload: &[f64]) {}
}

pub struct NoHook;

impl RoundHook for NoHook {}

/// Per-round disagreement `max_i |y_n[i] - mean[i]|` of every agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceRecorder {
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub agent: usize,
    pub disagreement: f64,
}

impl TraceRecorder {
    pub fn record(&mut self, round: usize, values: &[Vec<f64>]) {
        let Some(first) = values.first() else { return };
        let n = values.len() as f64;
        let mean: Vec<f64> = (0..first.len())
            .map(|i| values.iter().map(|v| v[i]).sum::<f64>() / n)
            .collect();
        for (agent, v) in values.iter().enumerate() {
            let disagreement = v
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m).abs())
                .fold(0.0, f64::max);
            self.rows.push(TraceRow {
                round,
                agent,
                disagreement,
            });
        }
    }
}

impl RoundHook for TraceRecorder {
    fn on_round(&mut self, round: usize, sent: &[Vec<f64>]) {
        self.record(round, sent);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusOutcome {
    /// Final value held by each agent.
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Last max-norm change between successive iterates.
    pub deviation: f64,
}

/// A configured consensus engine for one topology.
#[derive(Clone, Debug)]
pub struct Consensus {
    topology: Topology,
    weights: DMatrix<f64>,
    beta: f64,
    rho: f64,
    cfg: ConsensusConfig,
}

impl Consensus {
    pub fn new(topology: Topology, cfg: ConsensusConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = metropolis_weights(&topology)?;
        let n = topology.len();
        let (beta, rho) = if n == 1 {
            (cfg.beta.unwrap_or(0.0), 0.0)
        } else {
            let mut eig: Vec<f64> = weights
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let lambda2 = eig[1];
            let lambda_n = eig[n - 1];
            let beta = cfg.beta.unwrap_or_else(|| {
                ((lambda2 + lambda_n) / (2.0 - lambda2 - lambda_n)).clamp(0.0, 0.99)
            });
            // The update is y ← ((1+β)W − βI) y when η1 = 2, η2 = −1; in
            // general the iteration matrix is (1 + β(η1−1)) W + β η2 I.
            let a = 1.0 + beta * (cfg.eta1 - 1.0);
            let d = beta * cfg.eta2;
            let rho = eig[1..]
                .iter()
                .map(|&l| (a * l + d).abs())
                .fold(0.0, f64::max);
            (beta, rho)
        };
        if rho >= 1.0 {
            return Err(Error::Consensus(format!(
                "beta {beta} gives contraction factor {rho:.4} >= 1 on this topology"
            )));
        }
        Ok(Self {
            topology,
            weights,
            beta,
            rho,
            cfg,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Spectral contraction factor of one round on the disagreement subspace.
    pub fn contraction(&self) -> f64 {
        self.rho
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn agents(&self) -> usize {
        self.topology.len()
    }

    /// Plain accelerated consensus on the given initial values.
    pub fn run(&self, initial: &[Vec<f64>], hook: &mut dyn RoundHook) -> Result<ConsensusOutcome> {
        self.iterate(initial, None, hook)
    }

    /// Noisy consensus; `stream` separates independent runs under one seed.
    pub fn run_private(
        &self,
        initial: &[Vec<f64>],
        stream: u64,
        hook: &mut dyn RoundHook,
    ) -> Result<ConsensusOutcome> {
        self.iterate(initial, Some(stream), hook)
    }

    fn iterate(
        &self,
        initial: &[Vec<f64>],
        noise_stream: Option<u64>,
        hook: &mut dyn RoundHook,
    ) -> Result<ConsensusOutcome> {
        let n = self.agents();
        if initial.len() != n {
            return Err(Error::Dimension(format!(
                "{} initial values for {n} agents",
                initial.len()
            )));
        }
        let dim = initial[0].len();
        if initial.iter().any(|v| v.len() != dim) {
            return Err(Error::Dimension(
                "initial values have different lengths".into(),
            ));
        }
        if n == 1 {
            return Ok(ConsensusOutcome {
                values: initial.to_vec(),
                iterations: 0,
                deviation: 0.0,
            });
        }
        let sigma = if noise_stream.is_some() {
            self.cfg.sigma
        } else {
            0.0
        };
        let gamma = self.cfg.gamma;
        let noisy = sigma > 0.0;
        let mut rngs: Vec<ChaCha8Rng> = (0..n)
            .map(|agent| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(noise_stream.unwrap_or(0) * 1024 + agent as u64);
                rng
            })
            .collect();
        let mut y: Vec<Vec<f64>> = initial.to_vec();
        let mut delta: Vec<Vec<f64>> = Vec::new();
        if noisy {
            let half = 0.5 * sigma * gamma;
            delta = rngs.iter_mut().map(|rng| draw(rng, dim, half)).collect();
            for (v, d) in y.iter_mut().zip(&delta) {
                for (a, b) in v.iter_mut().zip(d) {
                    *a += b;
                }
            }
        }
        let a = 1.0 + self.beta * (self.cfg.eta1 - 1.0);
        let d = self.beta * self.cfg.eta2;
        let tail = (n as f64).sqrt() * self.rho / (1.0 - self.rho);
        let mut deviation = f64::INFINITY;
        for k in 0..self.cfg.max_iters {
            hook.on_round(k, &y);
            let next: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    // Only the agent's own value and its neighbours' values.
                    let mut out: Vec<f64> = y[i].iter().map(|v| self.weights[(i, i)] * v).collect();
                    for &j in self.topology.neighbors(i) {
                        let w = self.weights[(i, j)];
                        for (o, v) in out.iter_mut().zip(&y[j]) {
                            *o += w * v;
                        }
                    }
                    for (o, v) in out.iter_mut().zip(&y[i]) {
                        *o = a * *o + d * v;
                    }
                    out
                })
                .collect();
            deviation = next
                .par_iter()
                .zip(&y)
                .map(|(u, v)| {
                    u.iter()
                        .zip(v)
                        .map(|(p, q)| (p - q).abs())
                        .fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max);
            y = next;
            let mut noise_bound = 0.0;
            if noisy {
                let half = 0.5 * sigma * gamma.powi(k as i32 + 2);
                noise_bound = half;
                let fresh: Vec<Vec<f64>> =
                    rngs.iter_mut().map(|rng| draw(rng, dim, half)).collect();
                for ((v, old), new) in y.iter_mut().zip(&delta).zip(&fresh) {
                    for ((a, o), f) in v.iter_mut().zip(old).zip(new) {
                        *a += f - o;
                    }
                }
                delta = fresh;
            }
            if tail * deviation < self.cfg.stop_tol && noise_bound < self.cfg.stop_tol {
                return Ok(ConsensusOutcome {
                    values: y,
                    iterations: k + 1,
                    deviation,
                });
            }
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.max_iters,
            deviation,
        })
    }

    /// Floods agent 0's result along a breadth-first tree so that every
    /// agent ends up holding the same bits. Returns the relay rounds used.
    pub fn finalize(
        &self,
        outcome: &mut ConsensusOutcome,
        first_round: usize,
        hook: &mut dyn RoundHook,
    ) -> usize {
        let root = outcome.values[0].clone();
        let mut depth_max = 0;
        for (parent, child, depth) in self.topology.bfs_tree(0) {
            if let Some(p) = parent {
                hook.on_relay(first_round + depth - 1, p, child, &root);
                outcome.values[child] = root.clone();
                depth_max = depth_max.max(depth);
            }
        }
        depth_max
    }

    /// Every agent learns the concatenation of all agents' segments.
    ///
    /// Agent `n` starts from a zero vector holding only its own segment at
    /// its offset; consensus yields the mean, which times the agent count
    /// is the full stack.
    pub fn gather(&self, segments: &[Vec<f64>], hook: &mut dyn RoundHook) -> Result<Vec<f64>> {
        let n = self.agents();
        if segments.len() != n {
            return Err(Error::Dimension(format!(
                "{} segments for {n} agents",
                segments.len()
            )));
        }
        if n == 1 {
            return Ok(segments[0].clone());
        }
        let total: usize = segments.iter().map(Vec::len).sum();
        let mut offset = 0;
        let initial: Vec<Vec<f64>> = segments
            .iter()
            .map(|s| {
                let mut v = vec![0.0; total];
                v[offset..offset + s.len()].copy_from_slice(s);
                offset += s.len();
                v
            })
            .collect();
        let mut out = self.run(&initial, hook)?;
        let rounds = out.iterations;
        self.finalize(&mut out, rounds, hook);
        Ok(mean_to_sum(&out.values[0], n))
    }

    /// Every agent learns `Σ_n contributions[n]` under privacy noise.
    pub fn private_sum(
        &self,
        contributions: &[Vec<f64>],
        stream: u64,
        hook: &mut dyn RoundHook,
    ) -> Result<Vec<f64>> {
        let n = self.agents();
        if n == 1 {
            return contributions
                .first()
                .cloned()
                .ok_or_else(|| Error::Dimension("no contributions".into()));
        }
        let mut out = self.run_private(contributions, stream, hook)?;
        let rounds = out.iterations;
        self.finalize(&mut out, rounds, hook);
        Ok(mean_to_sum(&out.values[0], n))
    }
}

fn draw(rng: &mut ChaCha8Rng, dim: usize, half: f64) -> Vec<f64> {
    if half == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim).map(|_| rng.random_range(-half..=half)).collect()
}

/// `value · N_a`, turning a consensus mean into the network sum.
pub fn mean_to_sum(value: &[f64], agents: usize) -> Vec<f64> {
    value.iter().map(|v| v * agents as f64).collect()
}

/// Accelerated average consensus with default parameters.
pub fn aac_run(
    topology: &Topology,
    initial: &[Vec<f64>],
    cfg: &ConsensusConfig,
) -> Result<ConsensusOutcome> {
    Consensus::new(topology.clone(), cfg.clone())?.run(initial, &mut NoHook)
}

/// Privacy-preserving consensus using `cfg.sigma` and `cfg.gamma`.
pub fn ppaac_run(
    topology: &Topology,
    initial: &[Vec<f64>],
    cfg: &ConsensusConfig,
) -> Result<ConsensusOutcome> {
    Consensus::new(topology.clone(), cfg.clone())?.run_private(initial, 0, &mut NoHook)
}

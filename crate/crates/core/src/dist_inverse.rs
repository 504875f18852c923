//! Distributed, masked inversion of a row-partitioned square matrix.
//!
//! Each agent owns some row blocks `G_b` of `G`. It publishes only
//! `G_bᵀ W_b` for a private invertible `W_b`; consensus makes the stack
//! `S = Gᵀ·blockdiag(W)` known to all agents, every agent solves
//! `S B̄ = I` locally, and the owner of block `b` recovers
//! `W_b B̄_b = (G⁻¹)ᵀ` restricted to the rows of `b`, i.e. the columns of
//! `G⁻¹` that multiply its own injections.

use std::ops::Range;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::consensus::{Consensus, ConsensusConfig, RoundHook, Topology};
use crate::dlpf::{invert_checked, DlpfLayout};
use crate::error::{Error, Result};
use crate::te::random_invertible;

/// A contiguous block of rows owned by one agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowBlock {
    pub owner: usize,
    pub rows: Range<usize>,
}

/// Row blocks tiling `0..dim` in order, grouped contiguously by owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub dim: usize,
    pub agents: usize,
    pub blocks: Vec<RowBlock>,
}

impl Partition {
    pub fn new(dim: usize, agents: usize, blocks: Vec<RowBlock>) -> Result<Self> {
        let mut next = 0;
        let mut owner = 0;
        for b in &blocks {
            if b.rows.start != next {
                return Err(Error::Partition(format!(
                    "block {:?} does not start at row {next}",
                    b.rows
                )));
            }
            if b.owner < owner || b.owner >= agents {
                return Err(Error::Partition(format!(
                    "blocks must be grouped by owner in order (owner {})",
                    b.owner
                )));
            }
            owner = b.owner;
            next = b.rows.end;
        }
        if next != dim {
            return Err(Error::Partition(format!(
                "blocks cover {next} of {dim} rows"
            )));
        }
        Ok(Self {
            dim,
            agents,
            blocks,
        })
    }

    /// `agents` equal row blocks.
    pub fn equal(dim: usize, agents: usize) -> Result<Self> {
        if agents == 0 || !dim.is_multiple_of(agents) {
            return Err(Error::Partition(format!(
                "dimension {dim} is not divisible into {agents} equal row blocks"
            )));
        }
        let size = dim / agents;
        Self::new(
            dim,
            agents,
            (0..agents)
                .map(|a| RowBlock {
                    owner: a,
                    rows: a * size..(a + 1) * size,
                })
                .collect(),
        )
    }

    /// Reactive and active row blocks of every region of a DLPF layout;
    /// agent `n − 1` owns region `n`.
    pub fn from_layout(layout: &DlpfLayout) -> Self {
        let blocks = layout
            .regions
            .iter()
            .flat_map(|r| {
                [
                    RowBlock {
                        owner: r.region - 1,
                        rows: r.q.clone(),
                    },
                    RowBlock {
                        owner: r.region - 1,
                        rows: r.p.clone(),
                    },
                ]
            })
            .collect();
        Self::new(layout.dim(), layout.regions.len(), blocks).expect("layout tiles its rows")
    }

    pub fn blocks_of(&self, agent: usize) -> impl Iterator<Item = (usize, &RowBlock)> {
        self.blocks
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.owner == agent)
    }
}

/// `G_bᵀ W_b`.
pub fn mask_blocks(rows: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.shape() != (rows.nrows(), rows.nrows()) {
        return Err(Error::Dimension(format!(
            "mask of shape {:?} for a block of {} rows",
            w.shape(),
            rows.nrows()
        )));
    }
    Ok(rows.tr_mul(w))
}

/// Every agent's payloads (in its block order) to the full stack `S`, held
/// identically by all agents afterwards.
pub fn gather_masked(
    engine: &Consensus,
    partition: &Partition,
    payloads: &[Vec<DMatrix<f64>>],
    hook: &mut dyn RoundHook,
) -> Result<DMatrix<f64>> {
    if payloads.len() != partition.agents || engine.agents() != partition.agents {
        return Err(Error::Dimension(format!(
            "{} payload sets for {} agents",
            payloads.len(),
            partition.agents
        )));
    }
    let mut segments = Vec::with_capacity(partition.agents);
    for (agent, own) in payloads.iter().enumerate() {
        let blocks: Vec<_> = partition.blocks_of(agent).collect();
        if blocks.len() != own.len() {
            return Err(Error::Dimension(format!(
                "agent {agent} supplied {} payloads for {} blocks",
                own.len(),
                blocks.len()
            )));
        }
        let mut seg = Vec::new();
        for ((_, b), p) in blocks.iter().zip(own) {
            if p.shape() != (partition.dim, b.rows.len()) {
                return Err(Error::Dimension(format!(
                    "payload of agent {agent} has shape {:?}",
                    p.shape()
                )));
            }
            // column-major, so concatenation follows the stacked columns
            seg.extend_from_slice(p.as_slice());
        }
        segments.push(seg);
    }
    let flat = engine.gather(&segments, hook)?;
    Ok(DMatrix::from_column_slice(
        partition.dim,
        partition.dim,
        &flat,
    ))
}

/// Solves `S B̄ = I` by LU.
pub fn solve_masked(stacked: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !stacked.is_square() {
        return Err(Error::Dimension("masked system is not square".into()));
    }
    invert_checked(stacked)
}

/// `W_b B̄[rows_b, :]`: row `r` is column `rows_b.start + r` of `G⁻¹`.
pub fn recover_blocks(
    bbar: &DMatrix<f64>,
    rows: &Range<usize>,
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if w.shape() != (rows.len(), rows.len()) || rows.end > bbar.nrows() {
        return Err(Error::Dimension("mask does not match the row block".into()));
    }
    Ok(w * bbar.rows(rows.start, rows.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    /// `max |B − G⁻¹| / max |G⁻¹|` over every agent's recovered blocks.
    pub rel_error: f64,
    pub seconds: f64,
    pub iterations: usize,
}

/// Test matrix for the benchmark: i.i.d. uniform `[−1, 1]` entries.
pub fn bench_matrix(dim: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..=1.0))
}

/// Full pipeline on a random matrix split equally over a ring of agents,
/// compared against the direct inverse.
pub fn bench_inverse(
    dim: usize,
    agents: usize,
    seed: u64,
    cfg: &ConsensusConfig,
) -> Result<BenchRow> {
    let partition = Partition::equal(dim, agents)?;
    let g = bench_matrix(dim, seed);
    let start = Instant::now();
    let engine = Consensus::new(Topology::ring(agents), cfg.clone())?;
    let masks: Vec<DMatrix<f64>> = partition
        .blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            rng.set_stream(i as u64 + 1);
            random_invertible(&mut rng, b.rows.len(), crate::te::DEFAULT_KAPPA_MAX)
        })
        .collect::<Result<_>>()?;
    let payloads = (0..agents)
        .map(|a| {
            partition
                .blocks_of(a)
                .map(|(i, b)| {
                    mask_blocks(&g.rows(b.rows.start, b.rows.len()).into_owned(), &masks[i])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rounds = RoundCounter(0);
    let stacked = gather_masked(&engine, &partition, &payloads, &mut rounds)?;
    let recovered: Vec<(usize, DMatrix<f64>)> = (0..agents)
        .into_par_iter()
        .map(|a| {
            let bbar = solve_masked(&stacked)?;
            partition
                .blocks_of(a)
                .map(|(i, b)| recover_blocks(&bbar, &b.rows, &masks[i]).map(|m| (i, m)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let seconds = start.elapsed().as_secs_f64();
    let inv = invert_checked(&g)?;
    let scale = inv.amax();
    let mut err: f64 = 0.0;
    for (i, blk) in &recovered {
        let rows = &partition.blocks[*i].rows;
        let truth = inv.columns(rows.start, rows.len()).transpose();
        err = err.max((blk - truth).amax());
    }
    Ok(BenchRow {
        dim,
        rel_error: err / scale,
        seconds,
        iterations: rounds.0,
    })
}

struct RoundCounter(usize);

impl RoundHook for RoundCounter {
    fn on_round(&mut self, round: usize, _sent: &[Vec<f64>]) {
        self.0 = self.0.max(round + 1);
    }
}

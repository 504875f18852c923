//! Simulated synchronous network: records every delivered payload in the
//! receiver's ledger and scans it against the registry of tagged
//! confidential arrays.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use serde::Serialize;

use crate::consensus::{RoundHook, Topology};

/// What a payload is, as declared by the step that sends it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadClass {
    /// Consensus iterate of masked row blocks `G_bᵀ W_b`.
    MaskedInverse,
    /// Consensus iterate of encrypted QP shares.
    EncryptedShare,
    /// Consensus iterate of masked generator sensitivities.
    MaskedSensitivity,
    /// Consensus iterate of positively scaled line-flow rows.
    MaskedFlowRow,
    /// Consensus iterate of a sum perturbed by privacy noise.
    NoisyAggregate,
    /// Consensus iterate of a sum without privacy noise.
    ClearAggregate,
    /// Forward of a finished consensus result.
    Relay,
}

impl PayloadClass {
    /// Classes that may carry data derived from confidential summands.
    pub fn is_whitelisted(self) -> bool {
        !matches!(self, PayloadClass::ClearAggregate)
    }
}

/// A tagged array found verbatim inside a payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Exposure {
    /// Region (1-based) the array belongs to.
    pub owner: usize,
    pub label: String,
    pub key: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerRecord {
    /// Agents are 0-based; agent `n` runs region `n + 1`.
    pub sender: usize,
    pub receiver: usize,
    pub round: usize,
    pub fingerprint: u64,
    pub class: PayloadClass,
    pub len: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub exposures: Vec<Exposure>,
}

/// Chronological inbox of one agent. Append-only.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AgentLedger {
    pub agent: usize,
    records: Vec<LedgerRecord>,
}

impl AgentLedger {
    pub fn new(agent: usize) -> Self {
        Self {
            agent,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn push(&mut self, record: LedgerRecord) {
        self.records.push(record);
    }
}

/// Largest disagreement across agents in one round of one stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub stage: &'static str,
    pub round: usize,
    pub disagreement: f64,
}

/// Rounds spent by one consensus stage, relays included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageRounds {
    pub stage: &'static str,
    pub rounds: usize,
}

pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(values.len());
    for v in values {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

struct Tagged {
    exposure: Exposure,
    data: Vec<f64>,
    /// Index of the first non-zero entry, used as the search anchor.
    lead: usize,
}

const FILTER_BITS: u32 = 16;

/// Confidential arrays indexed by the bits of their first non-zero entry.
#[derive(Default)]
pub(crate) struct Registry {
    tagged: Vec<Tagged>,
    index: HashMap<u64, Vec<usize>>,
    filter: Vec<u64>,
}

fn slot(bits: u64) -> usize {
    (bits.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> (64 - FILTER_BITS)) as usize
}

impl Registry {
    /// Tags `data`. Arrays shorter than two entries, all-zero arrays and
    /// arrays with non-finite entries are not searchable and are skipped.
    pub fn add(&mut self, owner: usize, label: impl Into<String>, key: bool, data: &[f64]) {
        if data.len() < 2 || data.iter().any(|v| !v.is_finite()) {
            return;
        }
        let Some(lead) = data.iter().position(|&v| v != 0.0) else {
            return;
        };
        if self.filter.is_empty() {
            self.filter = vec![0; (1 << FILTER_BITS) / 64];
        }
        let bits = data[lead].to_bits();
        let s = slot(bits);
        self.filter[s / 64] |= 1 << (s % 64);
        self.index.entry(bits).or_default().push(self.tagged.len());
        self.tagged.push(Tagged {
            exposure: Exposure {
                owner,
                label: label.into(),
                key,
            },
            data: data.to_vec(),
            lead,
        });
    }

    /// Every tagged array occurring as a contiguous run of `payload`.
    pub fn scan(&self, payload: &[f64]) -> Vec<Exposure> {
        let mut hits: Vec<usize> = Vec::new();
        if self.tagged.is_empty() {
            return Vec::new();
        }
        for (i, v) in payload.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let bits = v.to_bits();
            let s = slot(bits);
            if self.filter[s / 64] & (1 << (s % 64)) == 0 {
                continue;
            }
            let Some(candidates) = self.index.get(&bits) else {
                continue;
            };
            for &c in candidates {
                let t = &self.tagged[c];
                if i < t.lead || i - t.lead + t.data.len() > payload.len() {
                    continue;
                }
                let start = i - t.lead;
                if payload[start..start + t.data.len()] == t.data[..] && !hits.contains(&c) {
                    hits.push(c);
                }
            }
        }
        hits.into_iter()
            .map(|c| self.tagged[c].exposure.clone())
            .collect()
    }
}

/// The network every consensus stage runs over.
pub(crate) struct Bus {
    topology: Topology,
    pub ledgers: Vec<AgentLedger>,
    pub registry: Registry,
    pub trace: Vec<ConvergencePoint>,
    pub stages: Vec<StageRounds>,
    class: PayloadClass,
    stage: &'static str,
    base: usize,
    next: usize,
}

impl Bus {
    pub fn new(topology: Topology) -> Self {
        let n = topology.len();
        Self {
            topology,
            ledgers: (0..n).map(AgentLedger::new).collect(),
            registry: Registry::default(),
            trace: Vec::new(),
            stages: Vec::new(),
            class: PayloadClass::Relay,
            stage: "",
            base: 0,
            next: 0,
        }
    }

    /// Starts a new consensus stage after every round used so far.
    pub fn begin(&mut self, stage: &'static str, class: PayloadClass) {
        self.base = self.next;
        self.stage = stage;
        self.class = class;
        self.stages.push(StageRounds { stage, rounds: 0 });
    }

    fn touch(&mut self, round: usize) {
        self.next = self.next.max(round + 1);
        if let Some(s) = self.stages.last_mut() {
            s.rounds = s.rounds.max(round + 1 - self.base);
        }
    }

    fn record(
        &self,
        from: usize,
        round: usize,
        class: PayloadClass,
        payload: &[f64],
    ) -> LedgerRecord {
        LedgerRecord {
            sender: from,
            receiver: from,
            round,
            fingerprint: fingerprint(payload),
            class,
            len: payload.len(),
            exposures: self.registry.scan(payload),
        }
    }

    fn deliver(&mut self, to: usize, record: &LedgerRecord) {
        self.ledgers[to].push(LedgerRecord {
            receiver: to,
            ..record.clone()
        });
    }
}

impl RoundHook for Bus {
    fn on_round(&mut self, round: usize, sent: &[Vec<f64>]) {
        let round = self.base + round;
        self.touch(round);
        let dim = sent.first().map_or(0, Vec::len);
        let n = sent.len() as f64;
        let mut worst: f64 = 0.0;
        for i in 0..dim {
            let mean = sent.iter().map(|v| v[i]).sum::<f64>() / n;
            for v in sent {
                worst = worst.max((v[i] - mean).abs());
            }
        }
        self.trace.push(ConvergencePoint {
            stage: self.stage,
            round,
            disagreement: worst,
        });
        for (from, payload) in sent.iter().enumerate() {
            let rec = self.record(from, round, self.class, payload);
            for i in 0..self.topology.degree(from) {
                let to = self.topology.neighbors(from)[i];
                self.deliver(to, &rec);
            }
        }
    }

    fn on_relay(&mut self, round: usize, from: usize, to: usize, payload: &[f64]) {
        let round = self.base + round;
        self.touch(round);
        let rec = self.record(from, round, PayloadClass::Relay, payload);
        self.deliver(to, &rec);
    }
}

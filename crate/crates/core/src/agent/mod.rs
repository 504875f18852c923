//! Per-region agents running the dispatch protocol over a simulated bus:
//! formulating, encrypting, sharing, solving and decrypting.
//!
//! Public to every agent: the bus skeleton (ids, kinds, regions, fixed
//! voltages and angles), the monitored-state registry with owners and line
//! endpoints, generator counts per region, the wind model and the topology.
//! Everything else stays inside the owning agent; whatever crosses the bus
//! is masked by private keys or by privacy noise.

mod audit;
mod bus;
mod report;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::consensus::{Consensus, ConsensusConfig};
use crate::dist_inverse::{gather_masked, mask_blocks, recover_blocks, solve_masked, Partition};
use crate::dlpf::{
    assemble_rows, block_repeat, line_flow_functional, DlpfLayout, Quantity, RegionRows,
};
use crate::error::{Error, Result};
use crate::grid_case::{GridCase, MonitoredState, RegionView};
use crate::qp::{check_kkt, solve_qp, KktReport, QpLayout, RegionBlocks, DEFAULT_TOL};
use crate::te::{
    assemble_p1, decrypt_solution, encrypt_local, gen_keys, mask_flow_expression, set_state_row,
    EncryptedQp, EncryptedShare, FlowExpression, KeyDims, TeKeys, DEFAULT_KAPPA_MAX,
};
use crate::wind::WindModel;

pub use audit::{privacy_audit, AuditReport, Finding, FindingKind};
pub use bus::{
    fingerprint, AgentLedger, ConvergencePoint, Exposure, LedgerRecord, PayloadClass, StageRounds,
};
pub use report::{CentralizedSummary, Comparison, DistributedSummary, RunReport};

use bus::Bus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Formulating,
    Encrypting,
    Sharing,
    Solving,
    Decrypting,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Formulating => "formulating",
            Phase::Encrypting => "encrypting",
            Phase::Sharing => "sharing",
            Phase::Solving => "solving",
            Phase::Decrypting => "decrypting",
            Phase::Done => "done",
        }
    }

    fn next(self) -> Phase {
        match self {
            Phase::Formulating => Phase::Encrypting,
            Phase::Encrypting => Phase::Sharing,
            Phase::Sharing => Phase::Solving,
            Phase::Solving => Phase::Decrypting,
            Phase::Decrypting | Phase::Done => Phase::Done,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub eps_b: f64,
    pub alpha_s: f64,
    /// Stopping rule, acceleration and noise of every consensus stage; the
    /// noise seed is replaced by `seed`.
    pub consensus: ConsensusConfig,
    pub qp_tol: f64,
    pub kappa_max: f64,
    /// Negative control: all keys are identities, so nothing is masked.
    pub identity_keys: bool,
    /// Negative control: the balance sum runs without privacy noise.
    pub clear_balance_sum: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            eps_b: 1e-4,
            alpha_s: 0.05,
            consensus: ConsensusConfig::default().with_noise(2.0, 0.4),
            qp_tol: DEFAULT_TOL,
            kappa_max: DEFAULT_KAPPA_MAX,
            identity_keys: false,
            clear_balance_sum: false,
        }
    }
}

/// A monitored state as every agent knows it.
#[derive(Clone, Debug, PartialEq)]
pub struct PublicState {
    pub state: MonitoredState,
    pub owner: usize,
    /// Unknown coordinates the state depends on.
    pub coords: Vec<usize>,
}

/// Information shared by all agents before the run.
#[derive(Clone, Debug)]
pub struct PublicInfo {
    pub layout: DlpfLayout,
    pub regions: usize,
    pub horizon: usize,
    pub wind: WindModel,
    /// Wind farm ids in the order of the wind model's coordinates.
    pub farm_ids: Vec<u32>,
    pub gens_per_region: Vec<usize>,
    pub states: Vec<PublicState>,
    /// Sorted union of the coordinates of all monitored states.
    pub coords: Vec<usize>,
}

impl PublicInfo {
    pub fn from_case(case: &GridCase) -> Result<Self> {
        let layout = DlpfLayout::new(&case.buses, case.regions);
        let mut states = Vec::with_capacity(case.monitored.len());
        for m in &case.monitored {
            let buses = match m {
                MonitoredState::LineFlow { line, .. } => {
                    let l = case
                        .line(*line)
                        .ok_or_else(|| Error::UnknownState(format!("line {line}")))?;
                    vec![l.from_bus, l.to_bus]
                }
                MonitoredState::Voltage { bus, .. } => {
                    if layout.coord(*bus, Quantity::Voltage).is_none() {
                        return Err(Error::UnknownState(format!("voltage of bus {bus}")));
                    }
                    vec![*bus]
                }
            };
            let quantities: &[Quantity] = match m {
                MonitoredState::LineFlow { .. } => &[Quantity::Voltage, Quantity::Angle],
                MonitoredState::Voltage { .. } => &[Quantity::Voltage],
            };
            let layout = &layout;
            let coords = buses
                .iter()
                .flat_map(|&b| quantities.iter().filter_map(move |&q| layout.coord(b, q)))
                .collect();
            states.push(PublicState {
                state: m.clone(),
                owner: case.state_owner(m)?,
                coords,
            });
        }
        let mut coords: Vec<usize> = states.iter().flat_map(|s| s.coords.clone()).collect();
        coords.sort_unstable();
        coords.dedup();
        Ok(Self {
            layout,
            regions: case.regions,
            horizon: case.horizon,
            wind: case.wind.clone(),
            farm_ids: case.wind_farms.iter().map(|f| f.id).collect(),
            gens_per_region: (1..=case.regions)
                .map(|r| case.generators_in(r).count())
                .collect(),
            states,
            coords,
        })
    }

    fn coord_index(&self, coord: usize) -> usize {
        self.coords
            .binary_search(&coord)
            .expect("monitored coordinate is registered")
    }

    fn qp_layout(&self) -> QpLayout {
        QpLayout {
            gens: self.gens_per_region.clone(),
            horizon: self.horizon,
            states: self.states.len(),
        }
    }
}

/// One region's agent.
#[derive(Debug)]
pub struct AgentState {
    region: usize,
    phase: Phase,
    view: RegionView,
    keys: TeKeys,
    rows: RegionRows,
    g_rows: DMatrix<f64>,
    k_rows: DMatrix<f64>,
    /// Row `r` is column `rows.q.start + r` of the inverse.
    inv_q: DMatrix<f64>,
    /// Row `r` is column `rows.p.start + r` of the inverse.
    inv_p: DMatrix<f64>,
    /// Sensitivity of each monitored coordinate to each own generator.
    psi: DMatrix<f64>,
    blocks: Option<RegionBlocks>,
    balance_summand: Vec<f64>,
    state_summand: Vec<f64>,
    share: Option<EncryptedShare>,
    masked_psi: DMatrix<f64>,
    upsilon: Vec<f64>,
    delta: Vec<f64>,
    /// Positive scale applied to each owned flow row `(t, s)`.
    flow_scales: Vec<(usize, usize, f64)>,
    problem: Option<EncryptedQp>,
    problem_fingerprint: u64,
    xbar: Option<DVector<f64>>,
    lambda_bar: Option<DVector<f64>>,
    iterations: usize,
    solution: Option<DVector<f64>>,
}

impl AgentState {
    fn new(view: RegionView, public: &PublicInfo, keys: TeKeys) -> Self {
        let rows = public.layout.region(view.region).clone();
        Self {
            region: view.region,
            phase: Phase::Formulating,
            view,
            keys,
            rows,
            g_rows: DMatrix::zeros(0, 0),
            k_rows: DMatrix::zeros(0, 0),
            inv_q: DMatrix::zeros(0, 0),
            inv_p: DMatrix::zeros(0, 0),
            psi: DMatrix::zeros(0, 0),
            blocks: None,
            balance_summand: Vec::new(),
            state_summand: Vec::new(),
            share: None,
            masked_psi: DMatrix::zeros(0, 0),
            upsilon: Vec::new(),
            delta: Vec::new(),
            flow_scales: Vec::new(),
            problem: None,
            problem_fingerprint: 0,
            xbar: None,
            lambda_bar: None,
            iterations: 0,
            solution: None,
        }
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn advance(&mut self, from: Phase) -> Result<()> {
        if self.phase != from {
            return Err(Error::OutOfOrder(format!(
                "agent {} cannot run step {} in phase {}",
                self.region,
                from.name(),
                self.phase.name()
            )));
        }
        self.phase = from.next();
        Ok(())
    }

    /// Recovered inverse columns of the own reactive and active rows.
    pub fn inverse_blocks(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.inv_q, &self.inv_p)
    }

    /// Monitored coordinates by own generators.
    pub fn generator_sensitivity(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn local_blocks(&self) -> Option<&RegionBlocks> {
        self.blocks.as_ref()
    }

    pub fn upsilon(&self) -> &[f64] {
        &self.upsilon
    }

    /// State right-hand sides as assembled, flow rows before masking
    /// excluded (they carry the owner's scaling).
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn problem(&self) -> Option<&EncryptedQp> {
        self.problem.as_ref()
    }

    pub fn problem_fingerprint(&self) -> u64 {
        self.problem_fingerprint
    }

    pub fn encrypted_solution(&self) -> Option<&DVector<f64>> {
        self.xbar.as_ref()
    }

    /// The own decrypted schedule; present only once the agent is done.
    pub fn solution(&self) -> Option<&DVector<f64>> {
        if self.phase == Phase::Done {
            self.solution.as_ref()
        } else {
            None
        }
    }

    /// `G⁻¹[coord, row]` for an own equation row.
    fn inverse_entry(&self, coord: usize, row: usize) -> f64 {
        if self.rows.q.contains(&row) {
            self.inv_q[(row - self.rows.q.start, coord)]
        } else {
            debug_assert!(self.rows.p.contains(&row));
            self.inv_p[(row - self.rows.p.start, coord)]
        }
    }

    fn key_dims(view: &RegionView, public: &PublicInfo) -> KeyDims {
        let rows = public.layout.region(view.region);
        KeyDims {
            vars: view.dim(),
            ramp_rows: view.generators.len() * view.horizon.saturating_sub(1),
            q_rows: rows.q.len(),
            p_rows: rows.p.len(),
        }
    }

    fn assemble_own_rows(&mut self, public: &PublicInfo) {
        let (g, k) = assemble_rows(&public.layout, &self.view.lines, self.rows.all());
        self.g_rows = g;
        self.k_rows = k;
    }

    fn masked_rows(&self) -> Result<Vec<DMatrix<f64>>> {
        let nq = self.rows.q.len();
        let np = self.rows.p.len();
        Ok(vec![
            mask_blocks(&self.g_rows.rows(0, nq).into_owned(), self.keys.w_q())?,
            mask_blocks(&self.g_rows.rows(nq, np).into_owned(), self.keys.w_p())?,
        ])
    }

    fn recover_inverse(&mut self, stacked: &DMatrix<f64>) -> Result<()> {
        let bbar = solve_masked(stacked)?;
        self.inv_q = recover_blocks(&bbar, &self.rows.q, self.keys.w_q())?;
        self.inv_p = recover_blocks(&bbar, &self.rows.p, self.keys.w_p())?;
        Ok(())
    }

    /// Local blocks, generator sensitivities and the summands of the
    /// balance and state right-hand sides.
    fn formulate_local(&mut self, public: &PublicInfo) -> Result<()> {
        let layout = &public.layout;
        let t_len = public.horizon;
        let ncoord = public.coords.len();
        let gens: Vec<_> = self.view.generators.iter().collect();
        let mut psi = DMatrix::zeros(ncoord, gens.len());
        for (g, gen) in gens.iter().enumerate() {
            if let Some(row) = layout.coord(gen.bus, Quantity::Angle) {
                for (i, &c) in public.coords.iter().enumerate() {
                    psi[(i, g)] = self.inverse_entry(c, row);
                }
            }
        }
        // Voltage states are readable by everyone from public coordinates;
        // flow rows are supplied later by their owners.
        let mut phi = DMatrix::zeros(public.states.len(), gens.len());
        for (s, st) in public.states.iter().enumerate() {
            if let MonitoredState::Voltage { .. } = st.state {
                let i = public.coord_index(st.coords[0]);
                phi.row_mut(s).copy_from(&psi.row(i));
            }
        }
        self.blocks = Some(RegionBlocks::from_generators(
            self.region,
            &gens,
            t_len,
            &phi,
        )?);
        self.psi = psi;

        self.balance_summand = (0..t_len)
            .map(|t| -self.view.loads.iter().map(|l| l.active[t]).sum::<f64>())
            .collect();

        let own = self.rows.all();
        let kv = &self.k_rows * layout.fixed_values();
        let mut injection = DMatrix::<f64>::zeros(own.len(), t_len);
        for l in &self.view.loads {
            for (q, profile) in [
                (Quantity::Angle, &l.active),
                (Quantity::Voltage, &l.reactive),
            ] {
                if let Some(r) = layout.coord(l.bus, q) {
                    for t in 0..t_len {
                        injection[(r - own.start, t)] -= profile[t];
                    }
                }
            }
        }
        for t in 0..t_len {
            for r in 0..own.len() {
                injection[(r, t)] -= kv[r];
            }
        }
        let mut base = DMatrix::<f64>::zeros(ncoord, t_len);
        for (i, &c) in public.coords.iter().enumerate() {
            for r in own.clone() {
                let w = self.inverse_entry(c, r);
                if w != 0.0 {
                    for t in 0..t_len {
                        base[(i, t)] += w * injection[(r - own.start, t)];
                    }
                }
            }
        }
        let mut wind = DMatrix::zeros(ncoord, public.farm_ids.len());
        for farm in &self.view.wind_farms {
            let f = public
                .farm_ids
                .iter()
                .position(|&id| id == farm.id)
                .ok_or_else(|| Error::DanglingReference(format!("wind farm {}", farm.id)))?;
            let p = layout.coord(farm.bus, Quantity::Angle);
            let q = layout.coord(farm.bus, Quantity::Voltage);
            for (i, &c) in public.coords.iter().enumerate() {
                let mut v = p.map_or(0.0, |r| self.inverse_entry(c, r));
                v += q.map_or(0.0, |r| farm.reactive_ratio() * self.inverse_entry(c, r));
                wind[(i, f)] = v;
            }
        }
        self.state_summand = base
            .as_slice()
            .iter()
            .chain(wind.as_slice())
            .copied()
            .collect();
        Ok(())
    }

    fn encrypt(&mut self, horizon: usize) -> Result<()> {
        let blocks = self.blocks.as_ref().expect("formulated before encrypting");
        self.share = Some(encrypt_local(blocks, &self.keys)?);
        self.masked_psi = block_repeat(&self.psi, horizon) * self.keys.m();
        Ok(())
    }

    /// Masked flow rows for every owned line-flow state, in registry order
    /// and period order, each followed by its right-hand side.
    fn line_flow_extension(
        &mut self,
        public: &PublicInfo,
        sens: &[DMatrix<f64>],
        aggregates: &StateAggregates,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let layout = public.qp_layout();
        let ncoord = public.coords.len();
        let fixed = public.layout.fixed_values();
        let mut masked = Vec::new();
        let mut plain = Vec::new();
        for (s, st) in public.states.iter().enumerate() {
            let MonitoredState::LineFlow { line, reverse } = st.state else {
                continue;
            };
            if st.owner != self.region {
                continue;
            }
            let l = self.view.line(line).ok_or_else(|| {
                Error::UnknownState(format!(
                    "line {line} is not visible to region {}",
                    self.region
                ))
            })?;
            let func = line_flow_functional(&public.layout, l, reverse);
            let terms: Vec<(usize, f64)> = func
                .unknown
                .iter()
                .map(|&(j, c)| (public.coord_index(j), c))
                .collect();
            let fixed_part: f64 = func.fixed.iter().map(|&(j, c)| c * fixed[j]).sum();
            let weights: Vec<f64> = (0..public.farm_ids.len())
                .map(|f| {
                    terms
                        .iter()
                        .map(|&(i, c)| c * aggregates.wind[(i, f)])
                        .sum()
                })
                .collect();
            for t in 0..public.horizon {
                let mut coeffs = DVector::zeros(layout.dim());
                for (m, block) in sens.iter().enumerate() {
                    let cols = layout.columns(m);
                    for &(i, c) in &terms {
                        let row = block.row(t * ncoord + i);
                        for (k, v) in row.iter().enumerate() {
                            coeffs[cols.start + k] += c * v;
                        }
                    }
                }
                let base: f64 = terms
                    .iter()
                    .map(|&(i, c)| c * aggregates.base[(i, t)])
                    .sum();
                let q = public
                    .wind
                    .at(t)
                    .project(&weights, 0.0)?
                    .quantile(1.0 - aggregates.alpha_s)?;
                let expr = FlowExpression {
                    coeffs,
                    rhs: l.flow_limit - base - fixed_part - q,
                };
                let scale = self.keys.next_flow_scale();
                let out = mask_flow_expression(&expr, scale)?;
                plain.extend(expr.coeffs.iter().copied());
                plain.push(expr.rhs);
                masked.extend(out.coeffs.iter().copied());
                masked.push(out.rhs);
                self.flow_scales.push((t, s, scale));
            }
        }
        Ok((masked, plain))
    }

    /// Right-hand sides of the voltage states; flow entries are
    /// placeholders replaced by the owners' rows.
    fn voltage_rhs(&self, public: &PublicInfo, aggregates: &StateAggregates) -> Result<Vec<f64>> {
        let s_len = public.states.len();
        let mut delta = vec![0.0; public.horizon * s_len];
        for (s, st) in public.states.iter().enumerate() {
            let MonitoredState::Voltage { upper, .. } = st.state else {
                continue;
            };
            let i = public.coord_index(st.coords[0]);
            let weights: Vec<f64> = aggregates.wind.row(i).iter().copied().collect();
            for t in 0..public.horizon {
                let q = public
                    .wind
                    .at(t)
                    .project(&weights, 0.0)?
                    .quantile(1.0 - aggregates.alpha_s)?;
                delta[t * s_len + s] = upper - aggregates.base[(i, t)] - q;
            }
        }
        Ok(delta)
    }

    /// Multipliers of the plain problem for the rows this agent scaled.
    fn unmasked_multipliers(&self, layout: &QpLayout, out: &mut DVector<f64>) {
        let lambda = self.lambda_bar.as_ref().expect("solved");
        let n = self.region - 1;
        let var_offset: usize = (0..n).map(|m| layout.region_dim(m)).sum();
        let ramp_offset: usize = (0..n)
            .map(|m| layout.gens[m] * layout.horizon.saturating_sub(1))
            .sum();
        let [p1, p2, p3, p4] = self.keys.phi();
        for (start, phi) in [
            (layout.cap_upper().start + var_offset, p1),
            (layout.cap_lower().start + var_offset, p2),
            (layout.ramp_upper().start + ramp_offset, p3),
            (layout.ramp_lower().start + ramp_offset, p4),
        ] {
            for (i, f) in phi.iter().enumerate() {
                out[start + i] = f * lambda[start + i];
            }
        }
        for &(t, s, scale) in &self.flow_scales {
            let row = layout.state_row(t, s);
            out[row] = scale * lambda[row];
        }
    }

    fn register(&self, bus: &mut Bus) {
        let r = self.region;
        let reg = &mut bus.registry;
        let nq = self.rows.q.len();
        reg.add(
            r,
            "reactive rows of G",
            false,
            self.g_rows.rows(0, nq).transpose().as_slice(),
        );
        reg.add(
            r,
            "active rows of G",
            false,
            self.g_rows
                .rows(nq, self.rows.p.len())
                .transpose()
                .as_slice(),
        );
        reg.add(r, "rows of K", false, self.k_rows.transpose().as_slice());
        for l in &self.view.loads {
            reg.add(
                r,
                format!("active profile of load {}", l.id),
                false,
                &l.active,
            );
            reg.add(
                r,
                format!("reactive profile of load {}", l.id),
                false,
                &l.reactive,
            );
        }
        for (name, data) in self.keys.secret_arrays() {
            reg.add(r, name, true, &data);
        }
    }

    fn register_formulation(&self, bus: &mut Bus, horizon: usize) {
        let r = self.region;
        let reg = &mut bus.registry;
        reg.add(
            r,
            "inverse columns (reactive)",
            false,
            self.inv_q.as_slice(),
        );
        reg.add(r, "inverse columns (active)", false, self.inv_p.as_slice());
        reg.add(r, "generator sensitivities", false, self.psi.as_slice());
        reg.add(
            r,
            "repeated generator sensitivities",
            false,
            block_repeat(&self.psi, horizon).as_slice(),
        );
        reg.add(r, "balance summand", false, &self.balance_summand);
        reg.add(r, "state summand", false, &self.state_summand);
        if let Some(b) = &self.blocks {
            let raw = b.part();
            reg.add(r, "cost matrix", false, raw.q.as_slice());
            reg.add(r, "quadratic costs", false, b.lambda.diagonal().as_slice());
            reg.add(r, "linear costs", false, b.c.as_slice());
            reg.add(r, "capacity upper", false, b.g_plus.as_slice());
            reg.add(r, "capacity lower", false, b.g_minus.as_slice());
            reg.add(r, "ramp upper", false, b.r_plus.as_slice());
            reg.add(r, "ramp lower", false, b.r_minus.as_slice());
            reg.add(r, "state block", false, b.u.as_slice());
        }
    }
}

/// Network sums of the state summands, as held by every agent.
struct StateAggregates {
    /// Coordinate values from loads and fixed quantities, per period.
    base: DMatrix<f64>,
    /// Coordinate sensitivity to each wind farm.
    wind: DMatrix<f64>,
    alpha_s: f64,
}

/// Wall-clock per step group.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepTimings {
    pub formulating_encrypting: f64,
    pub sharing: f64,
    pub solving_decrypting: f64,
    pub total: f64,
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    /// Decrypted schedule of each region, region order.
    pub solutions: Vec<DVector<f64>>,
    /// The encrypted optimum every agent computed.
    pub encrypted_solution: DVector<f64>,
    pub encrypted_objective: f64,
    pub encrypted_kkt: KktReport,
    pub qp_iterations: usize,
    /// Multipliers mapped back to the plain problem by their owners.
    pub multipliers: DVector<f64>,
    pub problem_fingerprints: Vec<u64>,
    pub upsilon: Vec<f64>,
    pub ledgers: Vec<AgentLedger>,
    pub trace: Vec<ConvergencePoint>,
    pub stages: Vec<StageRounds>,
    pub timings: StepTimings,
    pub layout: QpLayout,
}

impl ProtocolRun {
    /// All regions' schedules stacked in region order.
    pub fn concatenated(&self) -> DVector<f64> {
        let parts: Vec<f64> = self
            .solutions
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        DVector::from_vec(parts)
    }

    pub fn problems_identical(&self) -> bool {
        self.problem_fingerprints.windows(2).all(|w| w[0] == w[1])
    }
}

/// The simulated network with all agents, stepped phase by phase.
pub struct Protocol {
    cfg: ProtocolConfig,
    public: PublicInfo,
    engine: Consensus,
    balance_engine: Consensus,
    partition: Partition,
    agents: Vec<AgentState>,
    bus: Bus,
    aggregates: Option<StateAggregates>,
    timings: StepTimings,
}

fn key_seed(seed: u64, region: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (region as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl Protocol {
    pub fn new(case: &GridCase, cfg: ProtocolConfig) -> Result<Self> {
        crate::central::check_probabilities(cfg.eps_b, cfg.alpha_s)?;
        if case.topology.len() != case.regions || !case.topology.is_connected() {
            return Err(Error::DisconnectedTopology);
        }
        let public = PublicInfo::from_case(case)?;
        let consensus = ConsensusConfig {
            seed: cfg.seed,
            ..cfg.consensus.clone()
        };
        let engine = Consensus::new(case.topology.clone(), consensus.clone())?;
        let balance_engine = if cfg.clear_balance_sum {
            Consensus::new(
                case.topology.clone(),
                consensus.with_noise(0.0, cfg.consensus.gamma),
            )?
        } else {
            engine.clone()
        };
        let partition = Partition::from_layout(&public.layout);
        let mut agents = Vec::with_capacity(case.regions);
        for r in 1..=case.regions {
            let view = case.region_view(r)?;
            let dims = AgentState::key_dims(&view, &public);
            let keys = if cfg.identity_keys {
                TeKeys::identity(dims)
            } else {
                gen_keys(dims, key_seed(cfg.seed, r), cfg.kappa_max)?
            };
            agents.push(AgentState::new(view, &public, keys));
        }
        Ok(Self {
            bus: Bus::new(case.topology.clone()),
            cfg,
            public,
            engine,
            balance_engine,
            partition,
            agents,
            aggregates: None,
            timings: StepTimings::default(),
        })
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn public(&self) -> &PublicInfo {
        &self.public
    }

    fn step<T>(&mut self, phase: Phase, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        for a in &mut self.agents {
            a.advance(phase)?;
        }
        f(self).map_err(|e| e.in_phase(phase.name()))
    }

    /// Builds local rows, runs the masked distributed inverse and forms
    /// every agent's blocks and summands.
    pub fn formulate(&mut self) -> Result<()> {
        let start = Instant::now();
        self.step(Phase::Formulating, |p| {
            let public = &p.public;
            p.agents
                .par_iter_mut()
                .for_each(|a| a.assemble_own_rows(public));
            for a in &p.agents {
                a.register(&mut p.bus);
            }
            let payloads = p
                .agents
                .iter()
                .map(AgentState::masked_rows)
                .collect::<Result<Vec<_>>>()?;
            p.bus.begin("inverse", PayloadClass::MaskedInverse);
            let stacked = gather_masked(&p.engine, &p.partition, &payloads, &mut p.bus)?;
            p.agents
                .par_iter_mut()
                .map(|a| {
                    a.recover_inverse(&stacked)?;
                    a.formulate_local(public)
                })
                .collect::<Result<Vec<_>>>()?;
            for a in &p.agents {
                a.register_formulation(&mut p.bus, public.horizon);
            }
            Ok(())
        })?;
        self.timings.formulating_encrypting += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn encrypt(&mut self) -> Result<()> {
        let start = Instant::now();
        self.step(Phase::Encrypting, |p| {
            let horizon = p.public.horizon;
            p.agents
                .par_iter_mut()
                .map(|a| a.encrypt(horizon))
                .collect::<Result<Vec<_>>>()?;
            Ok(())
        })?;
        self.timings.formulating_encrypting += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Aggregates the right-hand sides, disseminates shares, sensitivities
    /// and flow rows, and has every agent assemble the encrypted problem.
    pub fn share(&mut self) -> Result<()> {
        let start = Instant::now();
        self.step(Phase::Sharing, |p| {
            let public = &p.public;
            let t_len = public.horizon;
            let ncoord = public.coords.len();
            let nfarm = public.farm_ids.len();

            let class = if p.cfg.clear_balance_sum {
                PayloadClass::ClearAggregate
            } else {
                PayloadClass::NoisyAggregate
            };
            p.bus.begin("balance", class);
            let summands: Vec<Vec<f64>> =
                p.agents.iter().map(|a| a.balance_summand.clone()).collect();
            let load_sum = p.balance_engine.private_sum(&summands, 1, &mut p.bus)?;
            let upsilon = (0..t_len)
                .map(|t| Ok(public.wind.total_quantile(p.cfg.eps_b, t)? + load_sum[t]))
                .collect::<Result<Vec<f64>>>()?;

            p.bus.begin("states", PayloadClass::NoisyAggregate);
            let summands: Vec<Vec<f64>> =
                p.agents.iter().map(|a| a.state_summand.clone()).collect();
            let sums = p.engine.private_sum(&summands, 2, &mut p.bus)?;
            let aggregates = StateAggregates {
                base: DMatrix::from_column_slice(ncoord, t_len, &sums[..ncoord * t_len]),
                wind: DMatrix::from_column_slice(ncoord, nfarm, &sums[ncoord * t_len..]),
                alpha_s: p.cfg.alpha_s,
            };

            p.bus.begin("shares", PayloadClass::EncryptedShare);
            let segments: Vec<Vec<f64>> = p
                .agents
                .iter()
                .map(|a| a.share.as_ref().expect("encrypted").to_payload())
                .collect();
            let flat = p.engine.gather(&segments, &mut p.bus)?;
            let mut shares = Vec::with_capacity(public.regions);
            let mut at = 0;
            for (m, &gens) in public.gens_per_region.iter().enumerate() {
                let len = EncryptedShare::payload_len(gens, t_len, public.states.len());
                shares.push(EncryptedShare::from_payload(
                    m + 1,
                    gens,
                    t_len,
                    public.states.len(),
                    &flat[at..at + len],
                )?);
                at += len;
            }

            let layout = public.qp_layout();
            let has_flows = public
                .states
                .iter()
                .any(|s| matches!(s.state, MonitoredState::LineFlow { .. }));
            let mut flow_rows: Vec<Vec<f64>> = vec![Vec::new(); public.regions];
            if has_flows {
                p.bus
                    .begin("sensitivities", PayloadClass::MaskedSensitivity);
                let segments: Vec<Vec<f64>> = p
                    .agents
                    .iter()
                    .map(|a| a.masked_psi.as_slice().to_vec())
                    .collect();
                let flat = p.engine.gather(&segments, &mut p.bus)?;
                let mut sens = Vec::with_capacity(public.regions);
                let mut at = 0;
                for m in 0..public.regions {
                    let cols = layout.region_dim(m);
                    let len = ncoord * t_len * cols;
                    sens.push(DMatrix::from_column_slice(
                        ncoord * t_len,
                        cols,
                        &flat[at..at + len],
                    ));
                    at += len;
                }
                let mut segments = Vec::with_capacity(public.regions);
                for a in p.agents.iter_mut() {
                    let (masked, plain) = a.line_flow_extension(public, &sens, &aggregates)?;
                    p.bus.registry.add(a.region, "flow rows", false, &plain);
                    segments.push(masked);
                }
                p.bus.begin("flow rows", PayloadClass::MaskedFlowRow);
                let flat = p.engine.gather(&segments, &mut p.bus)?;
                let mut at = 0;
                for (m, rows) in flow_rows.iter_mut().enumerate() {
                    let owned = public
                        .states
                        .iter()
                        .filter(|s| {
                            s.owner == m + 1 && matches!(s.state, MonitoredState::LineFlow { .. })
                        })
                        .count();
                    let len = owned * t_len * (layout.dim() + 1);
                    *rows = flat[at..at + len].to_vec();
                    at += len;
                }
            }

            let states = public.states.len();
            let regions = public.regions;
            p.agents
                .par_iter_mut()
                .map(|a| {
                    let mut delta = a.voltage_rhs(public, &aggregates)?;
                    let mut qp = assemble_p1(&shares, regions, t_len, states, &upsilon, &delta)?;
                    let width = layout.dim() + 1;
                    for (m, rows) in flow_rows.iter().enumerate() {
                        let mut chunks = rows.chunks_exact(width);
                        for (s, st) in public.states.iter().enumerate() {
                            if st.owner != m + 1
                                || !matches!(st.state, MonitoredState::LineFlow { .. })
                            {
                                continue;
                            }
                            for t in 0..t_len {
                                let chunk =
                                    chunks.next().expect("flow rows sized from the registry");
                                let expr = FlowExpression {
                                    coeffs: DVector::from_column_slice(&chunk[..width - 1]),
                                    rhs: chunk[width - 1],
                                };
                                set_state_row(&mut qp, t, s, &expr)?;
                                delta[t * states + s] = expr.rhs;
                            }
                        }
                    }
                    a.problem_fingerprint = fingerprint(
                        &[
                            qp.q.as_slice(),
                            qp.c.as_slice(),
                            qp.a.as_slice(),
                            qp.b.as_slice(),
                        ]
                        .concat(),
                    );
                    a.problem = Some(qp);
                    a.upsilon = upsilon.clone();
                    a.delta = delta;
                    Ok(())
                })
                .collect::<Result<Vec<_>>>()?;
            p.aggregates = Some(aggregates);
            Ok(())
        })?;
        self.timings.sharing += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Every agent solves its own copy of the encrypted problem.
    pub fn solve(&mut self) -> Result<()> {
        let start = Instant::now();
        let tol = self.cfg.qp_tol;
        self.step(Phase::Solving, |p| {
            p.agents
                .par_iter_mut()
                .map(|a| {
                    let qp = a.problem.as_ref().expect("assembled");
                    let sol = solve_qp(qp, tol)?;
                    a.xbar = Some(sol.x);
                    a.lambda_bar = Some(sol.lambda);
                    a.iterations = sol.iterations;
                    Ok(())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(())
        })?;
        self.timings.solving_decrypting += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn decrypt(&mut self) -> Result<()> {
        let start = Instant::now();
        let layout = self.public.qp_layout();
        self.step(Phase::Decrypting, |p| {
            for a in &mut p.agents {
                let xbar = a.xbar.as_ref().expect("solved");
                a.solution = Some(decrypt_solution(xbar, &a.keys, &layout, a.region)?);
            }
            Ok(())
        })?;
        self.timings.solving_decrypting += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Runs all remaining steps and collects the results.
    pub fn run(mut self) -> Result<ProtocolRun> {
        let start = Instant::now();
        self.formulate()?;
        self.encrypt()?;
        self.share()?;
        self.solve()?;
        self.decrypt()?;
        let mut timings = self.timings.clone();
        timings.total = start.elapsed().as_secs_f64();
        self.finish(timings)
    }

    fn finish(self, timings: StepTimings) -> Result<ProtocolRun> {
        let layout = self.public.qp_layout();
        let first = &self.agents[0];
        let qp = first.problem.as_ref().expect("assembled");
        let xbar = first.xbar.clone().expect("solved");
        let lambda_bar = first.lambda_bar.clone().expect("solved");
        let encrypted_kkt = check_kkt(qp, &xbar, &lambda_bar);
        let encrypted_objective = qp.objective(&xbar);
        let mut multipliers = lambda_bar.clone();
        for a in &self.agents {
            a.unmasked_multipliers(&layout, &mut multipliers);
        }
        let qp_iterations = first.iterations;
        Ok(ProtocolRun {
            solutions: self
                .agents
                .iter()
                .map(|a| a.solution().cloned().expect("done"))
                .collect(),
            encrypted_solution: xbar,
            encrypted_objective,
            encrypted_kkt,
            qp_iterations,
            multipliers,
            problem_fingerprints: self.agents.iter().map(|a| a.problem_fingerprint).collect(),
            upsilon: first.upsilon.clone(),
            ledgers: self.bus.ledgers,
            trace: self.bus.trace,
            stages: self.bus.stages,
            timings,
            layout,
        })
    }
}

/// Runs the whole protocol on `case`.
pub fn run_protocol(case: &GridCase, cfg: &ProtocolConfig) -> Result<ProtocolRun> {
    Protocol::new(case, cfg.clone())?.run()
}

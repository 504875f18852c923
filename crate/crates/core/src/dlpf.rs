//! Decoupled linearized power flow: assembly of the coefficient matrix, its
//! inverse blocks, and the affine maps from injections to monitored states.
//!
//! Sign convention: with the bus admittance matrix `Y = G + jB` built from
//! series admittances only (line charging and shunts are ignored),
//!
//! ```text
//! P = -B θ + G V        (rows: PQ and PV buses)
//! Q = -G θ - B V        (rows: PQ buses)
//! ```
//!
//! Unknowns are ordered region-major as `[V_1; θ_1; …; V_N; θ_N]` (V over the
//! PQ buses, θ over PQ and PV buses, each in bus-declaration order) and the
//! equations as `[Q_1; P_1; …; Q_N; P_N]`, so row block `Q_n` pairs with the
//! column block `V_n` and `P_n` with `θ_n`. Slack and PV magnitudes and the
//! slack angle are fixed and move to the right-hand side through `K`.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid_case::{Bus, BusKind, GridCase, Line, MonitoredState};

/// Largest accepted condition number of the coefficient matrix.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Quantity {
    Voltage,
    Angle,
}

/// Row/column block of one region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RegionRows {
    pub region: usize,
    /// Reactive rows, equal to the voltage-magnitude columns.
    pub q: Range<usize>,
    /// Active rows, equal to the angle columns.
    pub p: Range<usize>,
}

impl RegionRows {
    pub fn all(&self) -> Range<usize> {
        self.q.start..self.p.end
    }
}

/// Orderings of unknowns, equations and fixed quantities. Built from the
/// public bus registry only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DlpfLayout {
    /// Unknown `j` is quantity `.1` at bus `.0`; equation `j` is the
    /// matching injection (reactive for `Voltage`, active for `Angle`).
    pub coords: Vec<(u32, Quantity)>,
    pub regions: Vec<RegionRows>,
    /// Fixed quantity at a bus and its value.
    pub fixed: Vec<(u32, Quantity, f64)>,
    #[serde(skip)]
    coord_index: HashMap<(u32, Quantity), usize>,
    #[serde(skip)]
    fixed_index: HashMap<(u32, Quantity), usize>,
}

impl DlpfLayout {
    pub fn new(buses: &[Bus], regions: usize) -> Self {
        let mut coords = Vec::new();
        let mut blocks = Vec::with_capacity(regions);
        for r in 1..=regions {
            let start = coords.len();
            for b in buses
                .iter()
                .filter(|b| b.region == r && b.kind == BusKind::Pq)
            {
                coords.push((b.id, Quantity::Voltage));
            }
            let mid = coords.len();
            for b in buses
                .iter()
                .filter(|b| b.region == r && b.kind != BusKind::Slack)
            {
                coords.push((b.id, Quantity::Angle));
            }
            blocks.push(RegionRows {
                region: r,
                q: start..mid,
                p: mid..coords.len(),
            });
        }
        let mut fixed = Vec::new();
        for b in buses {
            if let Some(v) = b.voltage {
                fixed.push((b.id, Quantity::Voltage, v));
            }
            if let Some(a) = b.angle {
                fixed.push((b.id, Quantity::Angle, a));
            }
        }
        let coord_index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let fixed_index = fixed
            .iter()
            .enumerate()
            .map(|(i, &(b, q, _))| ((b, q), i))
            .collect();
        Self {
            coords,
            regions: blocks,
            fixed,
            coord_index,
            fixed_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Index of an unknown (equivalently of its injection equation).
    pub fn coord(&self, bus: u32, q: Quantity) -> Option<usize> {
        self.coord_index.get(&(bus, q)).copied()
    }

    pub fn fixed_slot(&self, bus: u32, q: Quantity) -> Option<usize> {
        self.fixed_index.get(&(bus, q)).copied()
    }

    pub fn fixed_values(&self) -> DVector<f64> {
        DVector::from_iterator(self.fixed.len(), self.fixed.iter().map(|f| f.2))
    }

    pub fn region(&self, region: usize) -> &RegionRows {
        &self.regions[region - 1]
    }

    /// Region (1-based) owning equation `row`.
    pub fn region_of_row(&self, row: usize) -> usize {
        self.regions
            .iter()
            .find(|r| r.all().contains(&row))
            .map(|r| r.region)
            .expect("row inside layout")
    }

    fn term(&self, bus: u32, q: Quantity) -> Term {
        if let Some(j) = self.coord(bus, q) {
            Term::Unknown(j)
        } else {
            Term::Fixed(
                self.fixed_slot(bus, q)
                    .expect("every quantity is either unknown or fixed"),
            )
        }
    }
}

enum Term {
    Unknown(usize),
    Fixed(usize),
}

/// Assembled linear system `G u + K v = injections`.
#[derive(Clone, Debug, Serialize)]
pub struct DlpfSystem {
    pub layout: DlpfLayout,
    #[serde(serialize_with = "ser_matrix")]
    pub g: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub k: DMatrix<f64>,
}

/// Rows `rows` of `[G | K]` from the given lines. Only lines incident to the
/// buses of those rows contribute, so a region can build its own block from
/// its view.
pub fn assemble_rows(
    layout: &DlpfLayout,
    lines: &[Line],
    rows: Range<usize>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = layout.dim();
    let mut g = DMatrix::zeros(rows.len(), n);
    let mut k = DMatrix::zeros(rows.len(), layout.fixed.len());
    let mut add = |row: usize, bus: u32, q: Quantity, v: f64| match layout.term(bus, q) {
        Term::Unknown(j) => g[(row, j)] += v,
        Term::Fixed(j) => k[(row, j)] += v,
    };
    for (local, global) in rows.enumerate() {
        let (bus, eq) = layout.coords[global];
        for l in lines {
            let other = if l.from_bus == bus {
                l.to_bus
            } else if l.to_bus == bus {
                l.from_bus
            } else {
                continue;
            };
            // Y_ii += y, Y_ik -= y for the series admittance y = g + jb.
            for (node, gy, by) in [(bus, l.g, l.b), (other, -l.g, -l.b)] {
                match eq {
                    Quantity::Voltage => {
                        add(local, node, Quantity::Angle, -gy);
                        add(local, node, Quantity::Voltage, -by);
                    }
                    Quantity::Angle => {
                        add(local, node, Quantity::Angle, -by);
                        add(local, node, Quantity::Voltage, gy);
                    }
                }
            }
        }
    }
    (g, k)
}

/// Builds the full coefficient matrix and checks that it is invertible.
pub fn assemble_dlpf(case: &GridCase) -> Result<DlpfSystem> {
    let layout = DlpfLayout::new(&case.buses, case.regions);
    let (g, k) = assemble_rows(&layout, &case.lines, 0..layout.dim());
    check_condition(&g)?;
    Ok(DlpfSystem { layout, g, k })
}

/// 2-norm condition number via singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn check_condition(m: &DMatrix<f64>) -> Result<()> {
    let c = condition_number(m);
    if !(c <= MAX_CONDITION) {
        return Err(Error::Singular {
            condition: c,
            limit: MAX_CONDITION,
        });
    }
    Ok(())
}

impl DlpfSystem {
    /// `K v` for the fixed voltages.
    pub fn fixed_injection(&self) -> DVector<f64> {
        &self.k * self.layout.fixed_values()
    }

    /// Solves for the unknowns given the injection vector.
    pub fn solve(&self, injections: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = injections - self.fixed_injection();
        self.g.clone().lu().solve(&rhs).ok_or(Error::Singular {
            condition: f64::INFINITY,
            limit: MAX_CONDITION,
        })
    }

    /// Injection vector (equation order) for generator outputs `gens`, wind
    /// outputs `wind` (one per farm) and loads in period `t`.
    pub fn injections(
        &self,
        case: &GridCase,
        gens: &[f64],
        wind: &[f64],
        t: usize,
    ) -> DVector<f64> {
        let lay = &self.layout;
        let mut inj = DVector::zeros(lay.dim());
        let mut add = |bus: u32, q: Quantity, v: f64| {
            if let Some(j) = lay.coord(bus, q) {
                inj[j] += v;
            }
        };
        for (g, p) in case.generators.iter().zip(gens) {
            add(g.bus, Quantity::Angle, *p);
        }
        for (f, w) in case.wind_farms.iter().zip(wind) {
            add(f.bus, Quantity::Angle, *w);
            add(f.bus, Quantity::Voltage, f.reactive_ratio() * w);
        }
        for l in &case.loads {
            add(l.bus, Quantity::Angle, -l.active[t]);
            add(l.bus, Quantity::Voltage, -l.reactive[t]);
        }
        inj
    }
}

/// Column blocks of `G⁻¹`, stored transposed per region: row `r` of
/// `q[n]` is column `regions[n].q.start + r` of the inverse.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityBlocks {
    #[serde(serialize_with = "ser_matrices")]
    pub q: Vec<DMatrix<f64>>,
    #[serde(serialize_with = "ser_matrices")]
    pub p: Vec<DMatrix<f64>>,
    #[serde(skip)]
    layout: DlpfLayout,
}

impl SensitivityBlocks {
    pub fn from_inverse(layout: &DlpfLayout, inverse: &DMatrix<f64>) -> Self {
        let take = |r: &Range<usize>| inverse.columns(r.start, r.len()).transpose();
        Self {
            q: layout.regions.iter().map(|r| take(&r.q)).collect(),
            p: layout.regions.iter().map(|r| take(&r.p)).collect(),
            layout: layout.clone(),
        }
    }

    /// Assembles from per-region blocks (e.g. recovered by each agent).
    pub fn from_regions(
        layout: &DlpfLayout,
        q: Vec<DMatrix<f64>>,
        p: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        for (r, rows) in layout.regions.iter().enumerate() {
            let ok = q
                .get(r)
                .is_some_and(|m| m.shape() == (rows.q.len(), layout.dim()))
                && p.get(r)
                    .is_some_and(|m| m.shape() == (rows.p.len(), layout.dim()));
            if !ok {
                return Err(Error::Dimension(format!(
                    "sensitivity blocks of region {} do not match the layout",
                    rows.region
                )));
            }
        }
        Ok(Self {
            q,
            p,
            layout: layout.clone(),
        })
    }

    pub fn layout(&self) -> &DlpfLayout {
        &self.layout
    }

    /// `G⁻¹[j, row]`.
    pub fn entry(&self, j: usize, row: usize) -> f64 {
        let r = self.layout.region_of_row(row) - 1;
        let rows = &self.layout.regions[r];
        if rows.q.contains(&row) {
            self.q[r][(row - rows.q.start, j)]
        } else {
            self.p[r][(row - rows.p.start, j)]
        }
    }

    /// The full inverse reassembled from the blocks.
    pub fn stack(&self) -> DMatrix<f64> {
        let n = self.layout.dim();
        let mut inv = DMatrix::zeros(n, n);
        for (r, rows) in self.layout.regions.iter().enumerate() {
            inv.columns_mut(rows.q.start, rows.q.len())
                .copy_from(&self.q[r].transpose());
            inv.columns_mut(rows.p.start, rows.p.len())
                .copy_from(&self.p[r].transpose());
        }
        inv
    }

    /// `‖G·B − I‖_F / ‖I‖_F`.
    pub fn identity_residual(&self, g: &DMatrix<f64>) -> f64 {
        let n = g.nrows();
        let r = g * self.stack() - DMatrix::<f64>::identity(n, n);
        r.norm() / (n as f64).sqrt().max(1.0)
    }
}

/// Centralized inverse; used by oracles and benchmarks, never by agents.
pub fn invert_oracle(sys: &DlpfSystem) -> Result<SensitivityBlocks> {
    let inv = invert_checked(&sys.g)?;
    Ok(SensitivityBlocks::from_inverse(&sys.layout, &inv))
}

pub(crate) fn invert_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_condition(m)?;
    m.clone().lu().try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
        limit: MAX_CONDITION,
    })
}

/// A monitored quantity as a linear function of unknowns and fixed values.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StateFunctional {
    pub unknown: Vec<(usize, f64)>,
    pub fixed: Vec<(usize, f64)>,
}

impl StateFunctional {
    fn push(&mut self, layout: &DlpfLayout, bus: u32, q: Quantity, v: f64) {
        match layout.term(bus, q) {
            Term::Unknown(j) => self.unknown.push((j, v)),
            Term::Fixed(j) => self.fixed.push((j, v)),
        }
    }

    /// `ℓᵀu + ℓ_fᵀv`.
    pub fn evaluate(&self, unknowns: &DVector<f64>, fixed: &DVector<f64>) -> f64 {
        self.unknown
            .iter()
            .map(|&(j, c)| c * unknowns[j])
            .sum::<f64>()
            + self.fixed.iter().map(|&(j, c)| c * fixed[j]).sum::<f64>()
    }

    /// Dense coefficient vector over the unknowns.
    pub fn dense(&self, dim: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        for &(j, c) in &self.unknown {
            v[j] += c;
        }
        v
    }
}

/// Active flow of a line as a functional; `reverse` measures to→from.
pub fn line_flow_functional(layout: &DlpfLayout, line: &Line, reverse: bool) -> StateFunctional {
    let s = if reverse { -1.0 } else { 1.0 };
    let mut f = StateFunctional::default();
    f.push(layout, line.from_bus, Quantity::Voltage, s * line.g);
    f.push(layout, line.to_bus, Quantity::Voltage, -s * line.g);
    f.push(layout, line.from_bus, Quantity::Angle, -s * line.b);
    f.push(layout, line.to_bus, Quantity::Angle, s * line.b);
    f
}

pub fn voltage_functional(layout: &DlpfLayout, bus: u32) -> StateFunctional {
    let mut f = StateFunctional::default();
    f.push(layout, bus, Quantity::Voltage, 1.0);
    f
}

/// Functional and upper limit of a monitored state.
pub fn state_functional(
    case: &GridCase,
    layout: &DlpfLayout,
    state: &MonitoredState,
) -> Result<(StateFunctional, f64)> {
    match state {
        MonitoredState::LineFlow { line, reverse } => {
            let l = case
                .line(*line)
                .ok_or_else(|| Error::UnknownState(format!("line {line}")))?;
            Ok((line_flow_functional(layout, l, *reverse), l.flow_limit))
        }
        MonitoredState::Voltage { bus, upper } => {
            if layout.coord(*bus, Quantity::Voltage).is_none() {
                return Err(Error::UnknownState(format!("voltage of bus {bus}")));
            }
            Ok((voltage_functional(layout, *bus), *upper))
        }
    }
}

/// Affine map of one monitored state:
/// `s_t = Σ 𝓤 g + Σ 𝓞 w + Σ 𝓞̂ ŵ + Σ 𝓨 d + Σ 𝓨̂ d̂ + ξ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateMap {
    pub state: MonitoredState,
    pub owner: usize,
    pub upper: f64,
    /// Per generator, in case order.
    pub gen: Vec<f64>,
    /// Per wind farm: active and reactive wind coefficients.
    pub wind_p: Vec<f64>,
    pub wind_q: Vec<f64>,
    /// Per load: active and reactive load coefficients.
    pub load_active: Vec<f64>,
    pub load_reactive: Vec<f64>,
    pub xi: f64,
}

impl StateMap {
    /// Coefficients of the active wind vector once reactive wind is folded
    /// in through each farm's power factor.
    pub fn wind_weights(&self, case: &GridCase) -> Vec<f64> {
        case.wind_farms
            .iter()
            .enumerate()
            .map(|(f, farm)| self.wind_p[f] + farm.reactive_ratio() * self.wind_q[f])
            .collect()
    }

    /// State value for explicit generator outputs, wind and loads at `t`.
    pub fn evaluate(&self, case: &GridCase, gens: &[f64], wind: &[f64], t: usize) -> f64 {
        let mut s = self.xi;
        s += self.gen.iter().zip(gens).map(|(a, b)| a * b).sum::<f64>();
        for (f, farm) in case.wind_farms.iter().enumerate() {
            s += self.wind_p[f] * wind[f] + self.wind_q[f] * farm.reactive_ratio() * wind[f];
        }
        for (k, l) in case.loads.iter().enumerate() {
            s += self.load_active[k] * l.active[t] + self.load_reactive[k] * l.reactive[t];
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateMaps {
    pub states: Vec<StateMap>,
}

/// Coefficients of every monitored state from the inverse blocks.
pub fn mapping_coefficients(
    sys: &DlpfSystem,
    blocks: &SensitivityBlocks,
    case: &GridCase,
) -> Result<StateMaps> {
    let lay = &sys.layout;
    let fixed = lay.fixed_values();
    let kv = sys.fixed_injection();
    let mut states = Vec::with_capacity(case.monitored.len());
    for m in &case.monitored {
        let (func, upper) = state_functional(case, lay, m)?;
        // sens[r] = ℓᵀ G⁻¹ e_r
        let sens: Vec<f64> = (0..lay.dim())
            .map(|r| {
                func.unknown
                    .iter()
                    .map(|&(j, c)| c * blocks.entry(j, r))
                    .sum()
            })
            .collect();
        let at = |bus: u32, q: Quantity| lay.coord(bus, q).map_or(0.0, |r| sens[r]);
        let xi = -sens.iter().zip(kv.iter()).map(|(a, b)| a * b).sum::<f64>()
            + func.fixed.iter().map(|&(j, c)| c * fixed[j]).sum::<f64>();
        states.push(StateMap {
            state: m.clone(),
            owner: case.state_owner(m)?,
            upper,
            gen: case
                .generators
                .iter()
                .map(|g| at(g.bus, Quantity::Angle))
                .collect(),
            wind_p: case
                .wind_farms
                .iter()
                .map(|f| at(f.bus, Quantity::Angle))
                .collect(),
            wind_q: case
                .wind_farms
                .iter()
                .map(|f| at(f.bus, Quantity::Voltage))
                .collect(),
            load_active: case
                .loads
                .iter()
                .map(|l| -at(l.bus, Quantity::Angle))
                .collect(),
            load_reactive: case
                .loads
                .iter()
                .map(|l| -at(l.bus, Quantity::Voltage))
                .collect(),
            xi,
        });
    }
    Ok(StateMaps { states })
}

impl StateMaps {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `Φ_n`: one row per monitored state, one column per generator of the
    /// region.
    pub fn phi(&self, case: &GridCase, region: usize) -> DMatrix<f64> {
        let cols: Vec<usize> = case
            .generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.region == region)
            .map(|(i, _)| i)
            .collect();
        DMatrix::from_fn(self.states.len(), cols.len(), |s, c| {
            self.states[s].gen[cols[c]]
        })
    }

    /// `U_n = blockdiag(Φ_n, …, Φ_n)` with `T` copies.
    pub fn u(&self, case: &GridCase, region: usize) -> DMatrix<f64> {
        block_repeat(&self.phi(case, region), case.horizon)
    }
}

/// Block-diagonal matrix with `copies` copies of `m`.
pub fn block_repeat(m: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(r * copies, c * copies);
    for t in 0..copies {
        out.view_mut((t * r, t * c), (r, c)).copy_from(m);
    }
    out
}

/// JSON dump of the system, inverse blocks and state maps for inspection.
pub fn debug_dump(sys: &DlpfSystem, blocks: &SensitivityBlocks, maps: &StateMaps) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "system": sys,
        "sensitivity": blocks,
        "states": maps,
    }))
    .expect("dump serializes")
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn ser_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    rows_of(m).serialize(s)
}

fn ser_matrices<S: serde::Serializer>(
    ms: &[DMatrix<f64>],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    ms.iter().map(rows_of).collect::<Vec<_>>().serialize(s)
}

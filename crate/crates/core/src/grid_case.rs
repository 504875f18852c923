//! Multi-region grid cases: the physical and economic problem instance, its
//! two on-disk formats, and the per-region views each ISO is entitled to.
//!
//! Region ids are 1-based everywhere in this module (and in the files); the
//! consensus layer addresses the same regions as 0-based agent indices.
//!
//! The bus skeleton (ids, node types, regions, voltage set-points) is treated
//! as a public registry; everything else is owned by exactly one region.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::error::{Error, Result};
use crate::wind::{JointComponent, JointGmm, WindModel};

/// Native case schema version written by [`GridCase::to_native_json`].
pub const NATIVE_FORMAT_VERSION: u32 = 1;

/// Horizon used when a case does not specify one (day-ahead, hourly).
pub const DEFAULT_HORIZON: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseFormat {
    NativeJson,
    MatpowerSubset,
}

impl std::str::FromStr for CaseFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" | "native" => Ok(CaseFormat::NativeJson),
            "matpower" | "m" => Ok(CaseFormat::MatpowerSubset),
            other => Err(format!("unknown case format `{other}` (json|matpower)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub region: usize,
    /// Fixed voltage magnitude (p.u.); present for slack and PV buses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voltage: Option<f64>,
    /// Fixed voltage angle (rad); present for the slack bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: u32,
    #[serde(rename = "from")]
    pub from_bus: u32,
    #[serde(rename = "to")]
    pub to_bus: u32,
    /// Series conductance (p.u.).
    pub g: f64,
    /// Series susceptance (p.u., negative for inductive lines).
    pub b: f64,
    pub flow_limit: f64,
    #[serde(skip)]
    pub owner_region: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    #[serde(skip)]
    pub region: usize,
    pub quad_cost: f64,
    pub lin_cost: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub ramp_min: f64,
    pub ramp_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: u32,
    pub bus: u32,
    #[serde(skip)]
    pub region: usize,
    pub active: Vec<f64>,
    pub reactive: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindFarm {
    pub id: u32,
    pub bus: u32,
    #[serde(skip)]
    pub region: usize,
    pub power_factor_angle: f64,
}

impl WindFarm {
    /// Reactive output per unit of active output.
    pub fn reactive_ratio(&self) -> f64 {
        self.power_factor_angle.tan()
    }
}

/// A system state with a single chance constraint `P{s <= upper} >= 1 - α_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitoredState {
    /// Active flow on a line, measured from→to (or to→from when `reverse`).
    LineFlow {
        line: u32,
        #[serde(default)]
        reverse: bool,
    },
    /// Voltage magnitude of a PQ bus.
    Voltage { bus: u32, upper: f64 },
}

#[derive(Clone, Debug)]
pub struct GridCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub wind_farms: Vec<WindFarm>,
    pub wind: WindModel,
    pub horizon: usize,
    pub regions: usize,
    pub topology: Topology,
    pub monitored: Vec<MonitoredState>,
    bus_index: HashMap<u32, usize>,
}

impl PartialEq for GridCase {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.buses == other.buses
            && self.lines == other.lines
            && self.generators == other.generators
            && self.loads == other.loads
            && self.wind_farms == other.wind_farms
            && self.wind == other.wind
            && self.horizon == other.horizon
            && self.regions == other.regions
            && self.topology == other.topology
            && self.monitored == other.monitored
    }
}

/// Everything one ISO may see: its own generators, loads, wind farms, inner
/// lines and the tie lines touching its buses, plus the public bus skeleton.
#[derive(Clone, Debug)]
pub struct RegionView {
    pub region: usize,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub wind_farms: Vec<WindFarm>,
    pub horizon: usize,
    pub regions: usize,
}

impl RegionView {
    fn bus_region(&self, id: u32) -> Option<usize> {
        self.buses.iter().find(|b| b.id == id).map(|b| b.region)
    }

    pub fn is_inner(&self, line: &Line) -> bool {
        self.bus_region(line.from_bus) == Some(self.region)
            && self.bus_region(line.to_bus) == Some(self.region)
    }

    pub fn inner_lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().filter(|l| self.is_inner(l))
    }

    pub fn tie_lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().filter(|l| !self.is_inner(l))
    }

    pub fn line(&self, id: u32) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// `H_n = |G_n| · T`.
    pub fn dim(&self) -> usize {
        self.generators.len() * self.horizon
    }
}

impl GridCase {
    pub fn bus(&self, id: u32) -> Option<&Bus> {
        self.bus_index.get(&id).map(|&i| &self.buses[i])
    }

    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn line(&self, id: u32) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn generators_in(&self, region: usize) -> impl Iterator<Item = &Generator> {
        self.generators.iter().filter(move |g| g.region == region)
    }

    pub fn loads_in(&self, region: usize) -> impl Iterator<Item = &Load> {
        self.loads.iter().filter(move |l| l.region == region)
    }

    pub fn wind_farms_in(&self, region: usize) -> impl Iterator<Item = &WindFarm> {
        self.wind_farms.iter().filter(move |w| w.region == region)
    }

    /// `H_n`.
    pub fn region_dim(&self, region: usize) -> usize {
        self.generators_in(region).count() * self.horizon
    }

    /// `H = Σ H_n`.
    pub fn total_dim(&self) -> usize {
        self.generators.len() * self.horizon
    }

    /// Region owning a monitored state: the line owner or the bus region.
    pub fn state_owner(&self, state: &MonitoredState) -> Result<usize> {
        match state {
            MonitoredState::LineFlow { line, .. } => self
                .line(*line)
                .map(|l| l.owner_region)
                .ok_or_else(|| Error::UnknownState(format!("line {line}"))),
            MonitoredState::Voltage { bus, .. } => self
                .bus(*bus)
                .map(|b| b.region)
                .ok_or_else(|| Error::UnknownState(format!("bus {bus}"))),
        }
    }

    pub fn region_view(&self, region: usize) -> Result<RegionView> {
        if region == 0 || region > self.regions {
            return Err(Error::UnknownRegion(region));
        }
        let bus_region = |id: u32| self.bus(id).map(|b| b.region);
        Ok(RegionView {
            region,
            buses: self.buses.clone(),
            lines: self
                .lines
                .iter()
                .filter(|l| {
                    bus_region(l.from_bus) == Some(region) || bus_region(l.to_bus) == Some(region)
                })
                .cloned()
                .collect(),
            generators: self.generators_in(region).cloned().collect(),
            loads: self.loads_in(region).cloned().collect(),
            wind_farms: self.wind_farms_in(region).cloned().collect(),
            horizon: self.horizon,
            regions: self.regions,
        })
    }

    /// Copy of the case with every load profile, and the horizon, truncated
    /// to the first `horizon` periods.
    pub fn with_horizon(&self, horizon: usize) -> Result<GridCase> {
        if horizon == 0 || horizon > self.horizon {
            return Err(Error::InvalidCase(format!(
                "horizon {horizon} not in 1..={}",
                self.horizon
            )));
        }
        let mut case = self.clone();
        case.horizon = horizon;
        for l in &mut case.loads {
            l.active.truncate(horizon);
            l.reactive.truncate(horizon);
        }
        if let Some(list) = &mut case.wind.per_period {
            list.truncate(horizon);
        }
        Ok(case)
    }

    pub fn with_topology(&self, topology: Topology) -> Result<GridCase> {
        let mut case = self.clone();
        case.topology = topology;
        case.validate()?;
        Ok(case)
    }

    /// Lines incident to a wind-farm bus, monitored in both directions.
    pub fn wind_linked_states(&self) -> Vec<MonitoredState> {
        let wind_buses: BTreeSet<u32> = self.wind_farms.iter().map(|w| w.bus).collect();
        let mut out = Vec::new();
        for l in &self.lines {
            if wind_buses.contains(&l.from_bus) || wind_buses.contains(&l.to_bus) {
                out.push(MonitoredState::LineFlow {
                    line: l.id,
                    reverse: false,
                });
                out.push(MonitoredState::LineFlow {
                    line: l.id,
                    reverse: true,
                });
            }
        }
        out
    }

    fn from_parts(raw: RawCase) -> Result<GridCase> {
        let mut bus_index = HashMap::new();
        for (i, b) in raw.buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", b.id)));
            }
        }
        let region_of = |id: u32, what: &str| -> Result<usize> {
            bus_index
                .get(&id)
                .map(|&i| raw.buses[i].region)
                .ok_or_else(|| Error::DanglingReference(format!("{what} references bus {id}")))
        };
        let mut lines = raw.lines;
        for l in &mut lines {
            l.owner_region = region_of(l.from_bus, &format!("line {}", l.id))?;
            region_of(l.to_bus, &format!("line {}", l.id))?;
        }
        let mut generators = raw.generators;
        for g in &mut generators {
            g.region = region_of(g.bus, &format!("generator {}", g.id))?;
        }
        let mut loads = raw.loads;
        for l in &mut loads {
            l.region = region_of(l.bus, &format!("load {}", l.id))?;
        }
        let mut wind_farms = raw.wind_farms;
        for w in &mut wind_farms {
            w.region = region_of(w.bus, &format!("wind farm {}", w.id))?;
        }
        let regions = raw.buses.iter().map(|b| b.region).max().unwrap_or(0);
        let topology = match raw.topology {
            Some(edges) => {
                let edges = edges
                    .into_iter()
                    .map(|(a, b)| {
                        if a == 0 || b == 0 || a > regions || b > regions {
                            Err(Error::InvalidCase(format!(
                                "topology edge ({a}, {b}) references unknown region"
                            )))
                        } else {
                            Ok((a - 1, b - 1))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Topology::new(regions, edges)?
            }
            None => Topology::ring(regions),
        };
        let wind = match raw.wind {
            Some(w) => w,
            None => {
                if !wind_farms.is_empty() {
                    return Err(Error::InvalidCase(
                        "wind farms declared without a wind distribution".into(),
                    ));
                }
                WindModel::stationary(JointGmm::point_mass(Vec::new()))
            }
        };
        let mut case = GridCase {
            name: raw.name,
            buses: raw.buses,
            lines,
            generators,
            loads,
            wind_farms,
            wind,
            horizon: raw.horizon,
            regions,
            topology,
            monitored: Vec::new(),
            bus_index,
        };
        case.monitored = match raw.monitored {
            Some(m) => m,
            None => case.wind_linked_states(),
        };
        case.validate()?;
        Ok(case)
    }

    /// Checks every structural invariant of a case.
    pub fn validate(&self) -> Result<()> {
        let slack = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack == 0 {
            return Err(Error::MissingSlack);
        }
        if slack > 1 {
            return Err(Error::InvalidCase(format!(
                "{slack} slack buses, expected one"
            )));
        }
        if self.regions == 0 {
            return Err(Error::InvalidCase("case has no buses".into()));
        }
        let used: BTreeSet<usize> = self.buses.iter().map(|b| b.region).collect();
        for r in 1..=self.regions {
            if !used.contains(&r) {
                return Err(Error::InvalidCase(format!("region {r} has no buses")));
            }
        }
        for b in &self.buses {
            if b.region == 0 {
                return Err(Error::InvalidCase(format!("bus {} has region 0", b.id)));
            }
            let ok = match b.kind {
                BusKind::Slack => b.voltage.is_some() && b.angle.is_some(),
                BusKind::Pv => b.voltage.is_some() && b.angle.is_none(),
                BusKind::Pq => b.voltage.is_none() && b.angle.is_none(),
            };
            if !ok {
                return Err(Error::InvalidCase(format!(
                    "bus {} ({:?}) has wrong fixed voltage/angle fields",
                    b.id, b.kind
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for l in &self.lines {
            if !ids.insert(l.id) {
                return Err(Error::InvalidCase(format!("duplicate line id {}", l.id)));
            }
            if l.from_bus == l.to_bus {
                return Err(Error::InvalidCase(format!("line {} is a self-loop", l.id)));
            }
            if !(l.g >= 0.0) || !l.b.is_finite() {
                return Err(Error::InvalidCase(format!(
                    "line {} has invalid parameters g={} b={}",
                    l.id, l.g, l.b
                )));
            }
            if !(l.flow_limit > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "line {} has non-positive flow limit",
                    l.id
                )));
            }
        }
        for g in &self.generators {
            if !(g.quad_cost > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "generator {} has non-positive quadratic cost",
                    g.id
                )));
            }
            if !(g.lin_cost > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "generator {} has non-positive linear cost",
                    g.id
                )));
            }
            if !(g.p_min <= g.p_max) {
                return Err(Error::InvalidCase(format!(
                    "generator {} has p_min > p_max",
                    g.id
                )));
            }
            if !(g.ramp_min <= 0.0 && g.ramp_max >= 0.0) {
                return Err(Error::InvalidCase(format!(
                    "generator {} ramp limits must straddle zero",
                    g.id
                )));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidCase("horizon must be at least 1".into()));
        }
        for l in &self.loads {
            if l.active.len() != self.horizon || l.reactive.len() != self.horizon {
                return Err(Error::InvalidCase(format!(
                    "load {} profiles do not have length {}",
                    l.id, self.horizon
                )));
            }
        }
        for w in &self.wind_farms {
            if !(w.power_factor_angle.abs() < FRAC_PI_2) {
                return Err(Error::InvalidCase(format!(
                    "wind farm {} power factor angle out of range",
                    w.id
                )));
            }
        }
        if self.wind.base.dim() != self.wind_farms.len() {
            return Err(Error::InvalidCase(format!(
                "wind distribution has dimension {}, case has {} wind farms",
                self.wind.base.dim(),
                self.wind_farms.len()
            )));
        }
        if let Some(list) = &self.wind.per_period {
            if list.len() != self.horizon || list.iter().any(|g| g.dim() != self.wind_farms.len()) {
                return Err(Error::InvalidCase(
                    "per-period wind distributions do not match horizon/farms".into(),
                ));
            }
        }
        if self.topology.len() != self.regions {
            return Err(Error::InvalidCase(format!(
                "topology has {} nodes, case has {} regions",
                self.topology.len(),
                self.regions
            )));
        }
        if !self.topology.is_connected() {
            return Err(Error::DisconnectedTopology);
        }
        for m in &self.monitored {
            match m {
                MonitoredState::LineFlow { line, .. } => {
                    if self.line(*line).is_none() {
                        return Err(Error::DanglingReference(format!(
                            "monitored state references line {line}"
                        )));
                    }
                }
                MonitoredState::Voltage { bus, .. } => match self.bus(*bus) {
                    None => {
                        return Err(Error::DanglingReference(format!(
                            "monitored state references bus {bus}"
                        )))
                    }
                    Some(b) if b.kind != BusKind::Pq => {
                        return Err(Error::InvalidCase(format!(
                            "voltage state on bus {bus} requires a PQ bus"
                        )))
                    }
                    _ => {}
                },
            }
        }
        Ok(())
    }

    /// Serializes into the native JSON schema.
    pub fn to_native_json(&self) -> String {
        let file = NativeCase {
            format_version: NATIVE_FORMAT_VERSION,
            name: self.name.clone(),
            horizon: Some(self.horizon),
            topology: Some(
                self.topology
                    .edges()
                    .iter()
                    .map(|&(a, b)| (a + 1, b + 1))
                    .collect(),
            ),
            buses: self.buses.clone(),
            lines: self.lines.clone(),
            generators: self.generators.clone(),
            loads: self.loads.clone(),
            wind_farms: self.wind_farms.clone(),
            wind: Some(NativeWind {
                components: self.wind.base.components(),
                per_period: self
                    .wind
                    .per_period
                    .as_ref()
                    .map(|l| l.iter().map(|g| g.components()).collect()),
            }),
            monitored: Some(self.monitored.clone()),
        };
        serde_json::to_string_pretty(&file).expect("case serializes")
    }
}

struct RawCase {
    name: String,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    generators: Vec<Generator>,
    loads: Vec<Load>,
    wind_farms: Vec<WindFarm>,
    wind: Option<WindModel>,
    horizon: usize,
    topology: Option<Vec<(usize, usize)>>,
    monitored: Option<Vec<MonitoredState>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeCase {
    format_version: u32,
    #[serde(default)]
    name: String,
    #[serde(default)]
    horizon: Option<usize>,
    #[serde(default)]
    topology: Option<Vec<(usize, usize)>>,
    buses: Vec<Bus>,
    #[serde(default)]
    lines: Vec<Line>,
    #[serde(default)]
    generators: Vec<Generator>,
    #[serde(default)]
    loads: Vec<Load>,
    #[serde(default)]
    wind_farms: Vec<WindFarm>,
    #[serde(default)]
    wind: Option<NativeWind>,
    #[serde(default)]
    monitored: Option<Vec<MonitoredState>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeWind {
    components: Vec<JointComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_period: Option<Vec<Vec<JointComponent>>>,
}

impl NativeWind {
    fn into_model(self) -> Result<WindModel> {
        let base = JointGmm::new(self.components)?;
        let per_period = self
            .per_period
            .map(|l| l.into_iter().map(JointGmm::new).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(WindModel { base, per_period })
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses a case. MATPOWER input needs the region-map sidecar (JSON).
pub fn parse_case(text: &str, format: CaseFormat, sidecar: Option<&str>) -> Result<GridCase> {
    match format {
        CaseFormat::NativeJson => parse_native(text),
        CaseFormat::MatpowerSubset => {
            let sidecar = sidecar.ok_or_else(|| {
                Error::InvalidCase("MATPOWER input requires a region-map sidecar".into())
            })?;
            crate::matpower::parse(text, sidecar)
        }
    }
}

fn parse_native(text: &str) -> Result<GridCase> {
    let file: NativeCase = serde_json::from_str(text).map_err(json_error)?;
    if file.format_version != NATIVE_FORMAT_VERSION {
        return Err(Error::InvalidCase(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    let horizon = match file.horizon {
        Some(h) => h,
        None => file
            .loads
            .first()
            .map(|l| l.active.len())
            .unwrap_or(DEFAULT_HORIZON),
    };
    GridCase::from_parts(RawCase {
        name: file.name,
        buses: file.buses,
        lines: file.lines,
        generators: file.generators,
        loads: file.loads,
        wind_farms: file.wind_farms,
        wind: file.wind.map(NativeWind::into_model).transpose()?,
        horizon,
        topology: file.topology,
        monitored: file.monitored,
    })
}

pub(crate) struct CaseParts {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub wind_farms: Vec<WindFarm>,
    pub wind: Option<WindModel>,
    pub horizon: usize,
    pub topology: Option<Vec<(usize, usize)>>,
    pub monitored: Option<Vec<MonitoredState>>,
}

pub(crate) fn build_case(p: CaseParts) -> Result<GridCase> {
    GridCase::from_parts(RawCase {
        name: p.name,
        buses: p.buses,
        lines: p.lines,
        generators: p.generators,
        loads: p.loads,
        wind_farms: p.wind_farms,
        wind: p.wind,
        horizon: p.horizon,
        topology: p.topology,
        monitored: p.monitored,
    })
}

pub(crate) fn wind_from_json(value: serde_json::Value) -> Result<WindModel> {
    let w: NativeWind = serde_json::from_value(value).map_err(json_error)?;
    w.into_model()
}

/// Loads a case from disk, picking the format from the extension. A
/// MATPOWER file `foo.m` reads its sidecar from `foo.regions.json`.
pub fn load_case(path: &std::path::Path, format: Option<CaseFormat>) -> Result<GridCase> {
    let format = format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("m") => CaseFormat::MatpowerSubset,
        _ => CaseFormat::NativeJson,
    });
    let text = std::fs::read_to_string(path)?;
    match format {
        CaseFormat::NativeJson => parse_case(&text, format, None),
        CaseFormat::MatpowerSubset => {
            let sidecar_path = path.with_extension("regions.json");
            let sidecar = std::fs::read_to_string(&sidecar_path)?;
            parse_case(&text, format, Some(&sidecar))
        }
    }
}

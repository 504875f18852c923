//! Importer for the numeric subset of MATPOWER case files (`baseMVA`, `bus`,
//! `gen`, `branch`, `gencost`), completed by a JSON sidecar that carries
//! everything MATPOWER has no notion of: the region map, the horizon and
//! load profile, ramp limits, wind farms and their distribution, the
//! communication topology and the monitored states.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid_case::{
    build_case, wind_from_json, Bus, BusKind, CaseParts, Generator, Line, Load, MonitoredState,
    WindFarm, DEFAULT_HORIZON,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    #[serde(default)]
    name: Option<String>,
    /// Region id → bus ids.
    regions: BTreeMap<usize, Vec<u32>>,
    #[serde(default)]
    horizon: Option<usize>,
    /// Multiplier applied to every bus load in each period.
    #[serde(default)]
    load_profile: Option<Vec<f64>>,
    /// Ramp limit as a fraction of `p_max`, both directions.
    #[serde(default = "default_ramp")]
    ramp_fraction: f64,
    /// Lower output bound as a fraction of `p_max` (overrides `Pmin` when
    /// larger).
    #[serde(default)]
    pmin_fraction: f64,
    /// Flow limit for branches whose `rateA` is zero (p.u.).
    #[serde(default)]
    default_flow_limit: Option<f64>,
    /// Per-branch flow limit overrides (p.u.), keyed by 1-based branch row.
    #[serde(default)]
    flow_limits: BTreeMap<u32, f64>,
    #[serde(default)]
    wind_farms: Vec<SidecarFarm>,
    #[serde(default)]
    wind: Option<serde_json::Value>,
    #[serde(default)]
    topology: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    monitored: Option<Vec<MonitoredState>>,
}

fn default_ramp() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFarm {
    id: u32,
    bus: u32,
    #[serde(default)]
    power_factor_angle: f64,
}

struct Tables {
    base_mva: f64,
    matrices: HashMap<String, Vec<Vec<f64>>>,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_number(tok: &str, line: usize, column: usize) -> Result<f64> {
    match tok {
        "Inf" | "inf" => Ok(f64::INFINITY),
        "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok
            .parse::<f64>()
            .map_err(|_| syntax(line, column, format!("invalid number `{tok}`"))),
    }
}

/// Splits a row fragment into numbers, tracking columns for diagnostics.
fn push_numbers(frag: &str, offset: usize, line: usize, row: &mut Vec<f64>) -> Result<()> {
    let mut start = None;
    for (i, ch) in frag
        .char_indices()
        .chain(std::iter::once((frag.len(), ' ')))
    {
        let sep = ch.is_whitespace() || ch == ',';
        match (start, sep) {
            (None, false) => start = Some(i),
            (Some(s), true) => {
                row.push(parse_number(&frag[s..i], line, offset + s + 1)?);
                start = None;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Matrix being read: name, finished rows, current row, opening line.
type OpenMatrix = (String, Vec<Vec<f64>>, Vec<f64>, usize);

fn parse_tables(text: &str) -> Result<Tables> {
    let mut base_mva = None;
    let mut matrices = HashMap::new();
    let mut open: Option<OpenMatrix> = None;
    let mut skipping_cell = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = strip_comment(raw);
        if skipping_cell {
            if line.contains('}') {
                skipping_cell = false;
            }
            continue;
        }
        if let Some((name, mut rows, mut row, started)) = open.take() {
            let (body, closed) = match line.find(']') {
                Some(i) => (&line[..i], true),
                None => (line, false),
            };
            let mut offset = 0;
            for (k, part) in body.split(';').enumerate() {
                if k > 0 && !row.is_empty() {
                    rows.push(std::mem::take(&mut row));
                }
                push_numbers(part, offset, lineno, &mut row)?;
                offset += part.len() + 1;
            }
            // A newline also ends a row.
            if !row.is_empty() {
                rows.push(std::mem::take(&mut row));
            }
            if closed {
                matrices.insert(name, rows);
            } else {
                open = Some((name, rows, row, started));
            }
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("function") {
            continue;
        }
        let Some(rest) = trimmed.strip_prefix("mpc.") else {
            return Err(syntax(
                lineno,
                1,
                format!("unexpected statement `{trimmed}`"),
            ));
        };
        let Some(eq) = rest.find('=') else {
            return Err(syntax(lineno, 1, "expected `=`"));
        };
        let name = rest[..eq].trim().to_string();
        let value = rest[eq + 1..].trim();
        let value_col = raw.find(value).map_or(1, |c| c + 1);
        if let Some(body) = value.strip_prefix('[') {
            let mut rows = Vec::new();
            let mut row = Vec::new();
            let (inner, closed) = match body.find(']') {
                Some(i) => (&body[..i], true),
                None => (body, false),
            };
            let mut offset = value_col;
            for (k, part) in inner.split(';').enumerate() {
                if k > 0 && !row.is_empty() {
                    rows.push(std::mem::take(&mut row));
                }
                push_numbers(part, offset, lineno, &mut row)?;
                offset += part.len() + 1;
            }
            if !row.is_empty() {
                rows.push(std::mem::take(&mut row));
            }
            if closed {
                matrices.insert(name, rows);
            } else {
                open = Some((name, rows, row, lineno));
            }
        } else if value.starts_with('{') {
            skipping_cell = !value.contains('}');
        } else if value.starts_with('\'') {
            // string field such as version
        } else {
            let num = value.trim_end_matches(';').trim();
            let v = parse_number(num, lineno, value_col)?;
            if name == "baseMVA" {
                base_mva = Some(v);
            }
        }
    }
    if let Some((name, _, _, started)) = open {
        return Err(syntax(
            started,
            1,
            format!("matrix `{name}` is never closed"),
        ));
    }
    Ok(Tables {
        base_mva: base_mva.ok_or_else(|| syntax(1, 1, "missing mpc.baseMVA"))?,
        matrices,
    })
}

fn table<'a>(t: &'a Tables, name: &str, min_cols: usize) -> Result<&'a [Vec<f64>]> {
    let rows = t
        .matrices
        .get(name)
        .ok_or_else(|| Error::InvalidCase(format!("missing mpc.{name}")))?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() < min_cols {
            return Err(Error::InvalidCase(format!(
                "mpc.{name} row {} has {} columns, need {min_cols}",
                i + 1,
                r.len()
            )));
        }
    }
    Ok(rows)
}

fn as_id(v: f64, what: &str) -> Result<u32> {
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(Error::InvalidCase(format!(
            "{what} `{v}` is not an integer id"
        )));
    }
    Ok(v as u32)
}

pub(crate) fn parse(text: &str, sidecar: &str) -> Result<crate::grid_case::GridCase> {
    let tables = parse_tables(text)?;
    let side: Sidecar = serde_json::from_str(sidecar).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: format!("sidecar: {e}"),
    })?;
    let base = tables.base_mva;
    if !(base > 0.0) {
        return Err(Error::InvalidCase("baseMVA must be positive".into()));
    }
    let mut region_of = HashMap::new();
    for (&r, buses) in &side.regions {
        for &b in buses {
            if region_of.insert(b, r).is_some() {
                return Err(Error::InvalidCase(format!(
                    "bus {b} assigned to two regions"
                )));
            }
        }
    }
    let horizon = side
        .horizon
        .or(side.load_profile.as_ref().map(Vec::len))
        .unwrap_or(DEFAULT_HORIZON);
    let profile = side
        .load_profile
        .clone()
        .unwrap_or_else(|| vec![1.0; horizon]);
    if profile.len() != horizon {
        return Err(Error::InvalidCase(format!(
            "load_profile has {} entries, horizon is {horizon}",
            profile.len()
        )));
    }

    let gen_rows = table(&tables, "gen", 10)?;
    let mut gen_voltage = HashMap::new();
    for g in gen_rows.iter().filter(|g| g[7] > 0.0) {
        gen_voltage.entry(as_id(g[0], "gen bus")?).or_insert(g[5]);
    }

    let mut buses = Vec::new();
    let mut loads = Vec::new();
    for row in table(&tables, "bus", 9)? {
        let id = as_id(row[0], "bus id")?;
        let region = *region_of
            .get(&id)
            .ok_or_else(|| Error::InvalidCase(format!("bus {id} has no region in the sidecar")))?;
        let vm = gen_voltage.get(&id).copied().unwrap_or(row[7]);
        let (kind, voltage, angle) = match row[1] as i64 {
            1 => (BusKind::Pq, None, None),
            2 => (BusKind::Pv, Some(vm), None),
            3 => (BusKind::Slack, Some(vm), Some(row[8].to_radians())),
            other => {
                return Err(Error::InvalidCase(format!(
                    "bus {id} has unsupported type {other}"
                )))
            }
        };
        buses.push(Bus {
            id,
            kind,
            region,
            voltage,
            angle,
        });
        let (pd, qd) = (row[2] / base, row[3] / base);
        if pd != 0.0 || qd != 0.0 {
            loads.push(Load {
                id,
                bus: id,
                region: 0,
                active: profile.iter().map(|f| f * pd).collect(),
                reactive: profile.iter().map(|f| f * qd).collect(),
            });
        }
    }
    for id in region_of.keys() {
        if !buses.iter().any(|b| b.id == *id) {
            return Err(Error::DanglingReference(format!(
                "sidecar region map references bus {id}"
            )));
        }
    }

    let mut lines = Vec::new();
    for (i, row) in table(&tables, "branch", 11)?.iter().enumerate() {
        if row[10] == 0.0 {
            continue;
        }
        let id = i as u32 + 1;
        let (r, x) = (row[2], row[3]);
        let z2 = r * r + x * x;
        if z2 == 0.0 {
            return Err(Error::InvalidCase(format!(
                "branch {id} has zero impedance"
            )));
        }
        let flow_limit = match side.flow_limits.get(&id) {
            Some(&v) => v,
            None if row[5] > 0.0 => row[5] / base,
            None => side.default_flow_limit.ok_or_else(|| {
                Error::InvalidCase(format!("branch {id} has no rating and no default"))
            })?,
        };
        lines.push(Line {
            id,
            from_bus: as_id(row[0], "branch from bus")?,
            to_bus: as_id(row[1], "branch to bus")?,
            g: r / z2,
            b: -x / z2,
            flow_limit,
            owner_region: 0,
        });
    }

    let costs = table(&tables, "gencost", 4)?;
    let mut generators = Vec::new();
    for (i, row) in gen_rows.iter().enumerate() {
        if row[7] <= 0.0 {
            continue;
        }
        let cost = costs
            .get(i)
            .ok_or_else(|| Error::InvalidCase(format!("generator {} has no gencost row", i + 1)))?;
        if cost[0] != 2.0 {
            return Err(Error::InvalidCase(format!(
                "generator {} uses a non-polynomial cost model",
                i + 1
            )));
        }
        let n = cost[3] as usize;
        let coeffs = &cost[4..];
        if coeffs.len() < n || !(2..=3).contains(&n) {
            return Err(Error::InvalidCase(format!(
                "generator {} cost must be a polynomial of degree 1 or 2",
                i + 1
            )));
        }
        let (c2, c1) = if n == 3 {
            (coeffs[0], coeffs[1])
        } else {
            (0.0, coeffs[0])
        };
        let p_max = row[8] / base;
        let p_min = (row[9] / base).max(side.pmin_fraction * p_max);
        let ramp = side.ramp_fraction * p_max;
        generators.push(Generator {
            id: i as u32 + 1,
            bus: as_id(row[0], "gen bus")?,
            region: 0,
            // ½ q x² + l x in per-unit equals c2 P² + c1 P in MW.
            quad_cost: 2.0 * c2 * base * base,
            lin_cost: c1 * base,
            p_min,
            p_max,
            ramp_min: -ramp,
            ramp_max: ramp,
        });
    }

    let wind_farms = side
        .wind_farms
        .into_iter()
        .map(|f| WindFarm {
            id: f.id,
            bus: f.bus,
            region: 0,
            power_factor_angle: f.power_factor_angle,
        })
        .collect();
    build_case(CaseParts {
        name: side.name.unwrap_or_default(),
        buses,
        lines,
        generators,
        loads,
        wind_farms,
        wind: side.wind.map(wind_from_json).transpose()?,
        horizon,
        topology: side.topology,
        monitored: side.monitored,
    })
}

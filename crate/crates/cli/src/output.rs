//! CSV row types for every table the CLI writes. Floats are written in
//! shortest round-trip form so tables parse back bit-exactly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const REPORT_FILE: &str = "report.json";
pub const SCHEDULE_FILE: &str = "schedules.csv";
pub const TRACE_FILE: &str = "convergence.csv";
pub const FIGURE_FILE: &str = "generator_output.csv";
pub const OBJECTIVE_FILE: &str = "objectives.csv";
pub const TIMING_FILE: &str = "timings.csv";

/// Output of one generator in one period, from one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub source: String,
    pub generator: u32,
    pub region: usize,
    pub t: usize,
    pub output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub round: usize,
    pub disagreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCsvRow {
    pub dim: usize,
    pub rel_error: f64,
    pub seconds: f64,
    pub rounds: usize,
}

/// Centralized and distributed output side by side, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub generator: u32,
    pub region: usize,
    pub t: usize,
    pub centralized: Option<f64>,
    pub distributed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub source: String,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: String,
    pub seconds: f64,
}

pub fn to_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    to_csv(rows, f).with_context(|| format!("writing {}", path.display()))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

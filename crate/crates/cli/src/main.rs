mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ccopf",
    version,
    about = "Distributed chance-constrained OPF simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a case centrally, with the multi-agent protocol, or both.
    Run(RunArgs),
    /// Accuracy and timing of the masked distributed inverse on random matrices.
    BenchInverse(BenchArgs),
    /// Summarise the artifacts of a previous `run`.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Centralized,
    Distributed,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TopologyChoice {
    /// Whatever the case file declares (a ring when it declares none).
    Case,
    Ring,
    Line,
    Star,
    Complete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    Json,
    Matpower,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Native JSON case or MATPOWER `.m` file (with its `.regions.json` sidecar).
    #[arg(long)]
    pub case: PathBuf,
    /// Defaults to the file extension.
    #[arg(long, value_enum)]
    pub format: Option<FormatChoice>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: Mode,
    /// Overrides the horizon of the case (number of periods).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Risk limit of the supply-demand constraints.
    #[arg(long, default_value_t = 1e-4)]
    pub eps_b: f64,
    /// Risk limit of the monitored-state constraints.
    #[arg(long, default_value_t = 0.05)]
    pub alpha_s: f64,
    /// Initial scale of the privacy noise.
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    /// Per-round decay of the privacy noise.
    #[arg(long, default_value_t = 0.4)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "case")]
    pub topology: TopologyChoice,
    /// Consensus stopping tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub stop_tol: f64,
    /// QP solver tolerance.
    #[arg(long, default_value_t = ccopf::qp::DEFAULT_TOL)]
    pub qp_tol: f64,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated matrix dimensions.
    #[arg(long, value_delimiter = ',', default_value = "45,90,135,180")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub agents: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub stop_tol: f64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory written by `run`.
    #[arg(long)]
    pub run: PathBuf,
    /// Where the tables go; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit codes: 0 success, 1 numerical or protocol failure, 2 usage or I/O.
pub enum Failure {
    Numerical(anyhow::Error),
    Usage(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Numerical(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl From<ccopf::Error> for Failure {
    fn from(e: ccopf::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.into())
        } else {
            Failure::Usage(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

#[derive(Serialize)]
struct ErrorJson {
    error: &'static str,
    message: String,
    exit_code: u8,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CCOPF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("CCOPF_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err(anyhow::anyhow!("CCOPF_THREADS must be a positive integer, got `{v}`").into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(anyhow::Error::from)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::BenchInverse(a) => commands::bench_inverse(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn fail(kind: &'static str, message: String, code: u8) -> ExitCode {
    let body = ErrorJson {
        error: kind,
        message,
        exit_code: code,
    };
    eprintln!("{}", serde_json::to_string(&body).unwrap_or_default());
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), 2),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            match f {
                Failure::Numerical(e) => fail("numerical", format!("{e:#}"), code),
                Failure::Usage(e) => fail("input", format!("{e:#}"), code),
            }
        }
    }
}

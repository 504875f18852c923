use std::collections::BTreeMap;
use std::fs;

use anyhow::{anyhow, Context};
use ccopf::agent::{run_protocol, ProtocolConfig, RunReport};
use ccopf::central::{check_probabilities, formulate, generator_schedule, solve_centralized};
use ccopf::consensus::{ConsensusConfig, Topology};
use ccopf::dist_inverse;
use ccopf::grid_case::{load_case, CaseFormat, GridCase};
use nalgebra::DMatrix;
use serde_json::Value;

use crate::{BenchArgs, Failure, FormatChoice, Mode, ReportArgs, RunArgs, TopologyChoice};
use ccopf_cli::output::*;

fn load(a: &RunArgs) -> Result<GridCase, Failure> {
    let format = a.format.map(|f| match f {
        FormatChoice::Json => CaseFormat::NativeJson,
        FormatChoice::Matpower => CaseFormat::MatpowerSubset,
    });
    let mut case = load_case(&a.case, format).map_err(|e| match e {
        ccopf::Error::Io(io) => {
            Failure::Usage(anyhow::Error::from(io).context(format!("reading {}", a.case.display())))
        }
        e => e.into(),
    })?;
    if let Some(h) = a.horizon {
        case = case.with_horizon(h)?;
    }
    let n = case.regions;
    let topology = match a.topology {
        TopologyChoice::Case => None,
        TopologyChoice::Ring => Some(Topology::ring(n)),
        TopologyChoice::Line => Some(Topology::line(n)),
        TopologyChoice::Star => Some(Topology::star(n)),
        TopologyChoice::Complete => Some(Topology::complete(n)),
    };
    if let Some(t) = topology {
        case = case.with_topology(t)?;
    }
    Ok(case)
}

pub fn protocol_config(a: &RunArgs) -> ProtocolConfig {
    ProtocolConfig {
        seed: a.seed,
        eps_b: a.eps_b,
        alpha_s: a.alpha_s,
        consensus: ConsensusConfig {
            stop_tol: a.stop_tol,
            ..ConsensusConfig::default()
        }
        .with_noise(a.sigma, a.gamma),
        qp_tol: a.qp_tol,
        ..ProtocolConfig::default()
    }
}

fn schedule_rows(case: &GridCase, source: &str, sched: &DMatrix<f64>) -> Vec<ScheduleRow> {
    let mut rows = Vec::with_capacity(sched.len());
    for (g, gen) in case.generators.iter().enumerate() {
        for t in 0..case.horizon {
            rows.push(ScheduleRow {
                source: source.into(),
                generator: gen.id,
                region: gen.region,
                t,
                output: sched[(g, t)],
            });
        }
    }
    rows
}

pub fn run(a: &RunArgs) -> Result<(), Failure> {
    check_probabilities(a.eps_b, a.alpha_s)?;
    let case = load(a)?;
    let cfg = protocol_config(a);
    let centralized = match a.mode {
        Mode::Centralized | Mode::Both => Some(solve_centralized(
            &case,
            cfg.eps_b,
            cfg.alpha_s,
            cfg.qp_tol,
        )?),
        Mode::Distributed => None,
    };
    let plain = match &centralized {
        Some(c) => c.formulation.clone(),
        None => formulate(&case, cfg.eps_b, cfg.alpha_s)?,
    };
    let distributed = match a.mode {
        Mode::Distributed | Mode::Both => Some(run_protocol(&case, &cfg)?),
        Mode::Centralized => None,
    };
    let report = RunReport::new(
        &case,
        &cfg,
        &plain,
        centralized.as_ref(),
        distributed.as_ref(),
    )?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    fs::write(a.out.join(REPORT_FILE), json + "\n").context("writing report")?;

    let mut rows = Vec::new();
    if let Some(c) = &centralized {
        rows.extend(schedule_rows(
            &case,
            "centralized",
            &generator_schedule(&case, &c.solution.x)?,
        ));
    }
    if let Some(d) = &distributed {
        rows.extend(schedule_rows(
            &case,
            "distributed",
            &generator_schedule(&case, &d.concatenated())?,
        ));
        let trace: Vec<TraceRow> = d
            .trace
            .iter()
            .map(|p| TraceRow {
                stage: p.stage.into(),
                round: p.round,
                disagreement: p.disagreement,
            })
            .collect();
        write_csv(&a.out.join(TRACE_FILE), &trace)?;
    }
    write_csv(&a.out.join(SCHEDULE_FILE), &rows)?;

    if let Some(c) = &report.centralized {
        println!(
            "centralized objective {:.10e} (kkt {:.2e})",
            c.objective,
            c.kkt.max_residual()
        );
    }
    if let Some(d) = &report.distributed {
        println!(
            "distributed objective {:.10e} (audit findings {}, messages {})",
            d.objective,
            d.audit.findings.len(),
            d.messages
        );
    }
    if let Some(cmp) = &report.comparison {
        println!(
            "relative objective error {:.3e}, max schedule deviation {:.3e}",
            cmp.objective_rel_error, cmp.max_schedule_deviation
        );
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}

pub fn bench_inverse(a: &BenchArgs) -> Result<(), Failure> {
    if a.dims.is_empty() {
        return Err(anyhow!("no dimensions given").into());
    }
    let cfg = ConsensusConfig {
        stop_tol: a.stop_tol,
        ..ConsensusConfig::default()
    };
    let mut rows = Vec::new();
    for &dim in &a.dims {
        let r = dist_inverse::bench_inverse(dim, a.agents, a.seed, &cfg)?;
        rows.push(BenchCsvRow {
            dim: r.dim,
            rel_error: r.rel_error,
            seconds: r.seconds,
            rounds: r.iterations,
        });
    }
    match &a.out {
        Some(p) => write_csv(p, &rows)?,
        None => to_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn number(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |v, k| v.get(k))?.as_f64()
}

pub fn report(a: &ReportArgs) -> Result<(), Failure> {
    let dir = &a.run;
    let report_path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&report_path)
        .with_context(|| format!("reading {}", report_path.display()))?;
    let v: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", report_path.display()))?;
    let schedules: Vec<ScheduleRow> = read_csv(&dir.join(SCHEDULE_FILE))?;
    let out = a.out.as_deref().unwrap_or(dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut figure: BTreeMap<(u32, usize), FigureRow> = BTreeMap::new();
    for r in &schedules {
        let row = figure.entry((r.generator, r.t)).or_insert(FigureRow {
            generator: r.generator,
            region: r.region,
            t: r.t,
            centralized: None,
            distributed: None,
        });
        match r.source.as_str() {
            "centralized" => row.centralized = Some(r.output),
            "distributed" => row.distributed = Some(r.output),
            other => return Err(anyhow!("unknown schedule source `{other}`").into()),
        }
    }
    let figure: Vec<FigureRow> = figure.into_values().collect();
    write_csv(&out.join(FIGURE_FILE), &figure)?;

    let mut objectives = Vec::new();
    for (source, path) in [
        ("centralized", &["centralized", "objective"][..]),
        ("distributed", &["distributed", "objective"][..]),
        ("encrypted", &["distributed", "encrypted_objective"][..]),
    ] {
        if let Some(o) = number(&v, path) {
            objectives.push(ObjectiveRow {
                source: source.into(),
                objective: o,
            });
        }
    }
    write_csv(&out.join(OBJECTIVE_FILE), &objectives)?;

    let mut timings = Vec::new();
    for (step, key) in [
        ("formulating and encrypting", "formulating_encrypting"),
        ("sharing", "sharing"),
        ("solving and decrypting", "solving_decrypting"),
        ("total", "total"),
    ] {
        if let Some(s) = number(&v, &["distributed", "timings", key]) {
            timings.push(TimingRow {
                step: step.into(),
                seconds: s,
            });
        }
    }
    if let Some(s) = number(&v, &["centralized", "seconds"]) {
        timings.push(TimingRow {
            step: "centralized".into(),
            seconds: s,
        });
    }
    write_csv(&out.join(TIMING_FILE), &timings)?;

    let name = v.get("case").and_then(Value::as_str).unwrap_or("?");
    println!("case {name}");
    for o in &objectives {
        println!("  {:<12} objective {:.10e}", o.source, o.objective);
    }
    if let Some(e) = number(&v, &["comparison", "objective_rel_error"]) {
        println!("  relative objective error {e:.3e}");
    }
    if let Some(e) = number(&v, &["comparison", "max_schedule_deviation"]) {
        println!("  max schedule deviation {e:.3e}");
    }
    if let Some(f) = v
        .pointer("/distributed/audit/findings")
        .and_then(Value::as_array)
    {
        println!("  audit findings {}", f.len());
    }
    for t in &timings {
        println!("  {:<28} {:>10.3} s", t.step, t.seconds);
    }
    println!("tables in {}", out.display());
    Ok(())
}

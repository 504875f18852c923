//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured value and pinned tolerance; the test fails if any
//! criterion fails.

mod common;

use std::time::Instant;

use ccopf::agent::{privacy_audit, run_protocol, ProtocolConfig, ProtocolRun};
use ccopf::central::{formulate, generator_schedule, solve_centralized, CentralizedRun};
use ccopf::consensus::{aac_run, ppaac_run, ConsensusConfig, Topology};
use ccopf::dist_inverse::bench_inverse;
use ccopf::dlpf::{assemble_dlpf, state_functional};
use ccopf::grid_case::GridCase;
use ccopf::qp::{solve_qp, stack_parts, RegionBlocks, DEFAULT_TOL};
use ccopf::te::{assemble_p1, decrypt_solution};
use common::instances::{keys_for, random_instance, shares_for};
use common::{case39, mixture_quantile, rng, toy2};
use nalgebra::DVector;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Solved {
    case: GridCase,
    central: CentralizedRun,
    dist: ProtocolRun,
    seconds: f64,
}

fn solve_both(case: GridCase, cfg: &ProtocolConfig) -> Solved {
    let start = Instant::now();
    let central = solve_centralized(&case, cfg.eps_b, cfg.alpha_s, DEFAULT_TOL).unwrap();
    let dist = run_protocol(&case, cfg).unwrap();
    Solved {
        case,
        central,
        dist,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn objective_equivalence(s: &Solved) -> Outcome {
    let central = s.central.solution.objective;
    let dist = s.central.formulation.qp.objective(&s.dist.concatenated());
    let rel = (dist - central).abs() / central.abs();
    check(
        rel <= 1e-6 && s.seconds <= 300.0,
        format!(
            "relative objective error {rel:.3e} (tol 1e-6), objectives {central:.6} / {dist:.6}, {:.2} s (limit 300 s)",
            s.seconds
        ),
    )
}

fn schedule_equivalence(s: &Solved) -> Outcome {
    let a = generator_schedule(&s.case, &s.central.solution.x).unwrap();
    let b = generator_schedule(&s.case, &s.dist.concatenated()).unwrap();
    let dev = (a - b).amax();
    check(
        dev <= 1e-5,
        format!("max generator deviation {dev:.3e} p.u. (tol 1e-5)"),
    )
}

fn inverse_accuracy() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for dim in [45, 90, 135, 180] {
        let row = bench_inverse(dim, 9, 1, &ConsensusConfig::default()).unwrap();
        pass &= row.rel_error <= 1e-9 && row.seconds <= 5.0;
        parts.push(format!(
            "{dim}: {:.2e} in {:.2} s",
            row.rel_error, row.seconds
        ));
    }
    check(pass, format!("{} (tol 1e-9, 5 s)", parts.join(", ")))
}

fn encryption_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut factored = 0;
    for seed in 0..100 {
        let inst = random_instance(50_000 + seed);
        let keys = keys_for(&inst, 77 + seed);
        let n = inst.blocks.len();
        let parts: Vec<_> = inst.blocks.iter().map(RegionBlocks::part).collect();
        let p0 = stack_parts(
            &parts,
            inst.horizon,
            inst.states,
            &inst.upsilon,
            &inst.delta,
        )
        .unwrap();
        let p1 = assemble_p1(
            &shares_for(&inst, &keys),
            n,
            inst.horizon,
            inst.states,
            &inst.upsilon,
            &inst.delta,
        )
        .unwrap();
        if p1.q.clone().cholesky().is_some() {
            factored += 1;
        }
        let x = solve_qp(&p0, DEFAULT_TOL).unwrap().x;
        let xbar = solve_qp(&p1, DEFAULT_TOL).unwrap().x;
        let mut dec = DVector::zeros(x.len());
        for (k, key) in keys.iter().enumerate() {
            let cols = p0.layout.columns(k);
            dec.rows_mut(cols.start, cols.len())
                .copy_from(&decrypt_solution(&xbar, key, &p1.layout, k + 1).unwrap());
        }
        worst = worst.max((&dec - &x).amax() / (1.0 + x.amax()));
    }
    check(
        factored == 100 && worst <= 1e-6,
        format!("{factored}/100 positive definite, worst scaled error {worst:.3e} (tol 1e-6)"),
    )
}

fn consensus_accuracy() -> Outcome {
    let mut r = rng(2024);
    let initial: Vec<Vec<f64>> = (0..9)
        .map(|_| (0..5).map(|_| r.random_range(-10.0..10.0)).collect())
        .collect();
    let mean: Vec<f64> = (0..5)
        .map(|i| initial.iter().map(|v| v[i]).sum::<f64>() / 9.0)
        .collect();
    let error = |values: &[Vec<f64>]| {
        values
            .iter()
            .flat_map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    };
    let ring = Topology::ring(9);
    let plain = aac_run(&ring, &initial, &ConsensusConfig::default()).unwrap();
    let cfg = ConsensusConfig {
        seed: 3,
        ..ConsensusConfig::default()
    }
    .with_noise(2.0, 0.4);
    let noisy = ppaac_run(&ring, &initial, &cfg).unwrap();
    let (e1, e2) = (error(&plain.values), error(&noisy.values));
    check(
        e1 <= 1e-10 && e2 <= 1e-8,
        format!(
            "accelerated {e1:.3e} in {} rounds (tol 1e-10), noisy {e2:.3e} in {} rounds (tol 1e-8)",
            plain.iterations, noisy.iterations
        ),
    )
}

/// Recomputes every converted chance constraint at the distributed dispatch
/// from linear solves and mixture quantiles; returns the worst violation.
fn chance_constraint_violation(s: &Solved, cfg: &ProtocolConfig) -> f64 {
    let case = &s.case;
    let schedule = generator_schedule(case, &s.dist.concatenated()).unwrap();
    let sys = assemble_dlpf(case).unwrap();
    let fixed = sys.layout.fixed_values();
    let farms = case.wind_farms.len();
    let mut worst = f64::NEG_INFINITY;
    for t in 0..case.horizon {
        let gmm = case.wind.at(t);
        let project = |a: &DVector<f64>| -> Vec<(f64, f64, f64)> {
            (0..gmm.weights().len())
                .map(|k| {
                    let cov = &gmm.covariances()[k];
                    (gmm.weights()[k], a.dot(&gmm.means()[k]), (cov * a).dot(a))
                })
                .collect()
        };
        // generation plus wind covers load with probability 1 − eps_b
        let supply: f64 = schedule.column(t).sum();
        let load: f64 = case.loads.iter().map(|l| l.active[t]).sum();
        let low_wind = mixture_quantile(&project(&DVector::from_element(farms, 1.0)), cfg.eps_b);
        worst = worst.max(load - low_wind - supply);

        let gens: Vec<f64> = schedule.column(t).iter().copied().collect();
        for state in &case.monitored {
            let (func, upper) = state_functional(case, &sys.layout, state).unwrap();
            let at = |wind: &[f64]| {
                let u = sys.solve(&sys.injections(case, &gens, wind, t)).unwrap();
                func.evaluate(&u, &fixed)
            };
            let base = at(&vec![0.0; farms]);
            let slopes = DVector::from_fn(farms, |k, _| {
                let mut w = vec![0.0; farms];
                w[k] = 1.0;
                at(&w) - base
            });
            let high = mixture_quantile(&project(&slopes), 1.0 - cfg.alpha_s);
            worst = worst.max(base + high - upper);
        }
    }
    worst
}

fn chance_constraint_validity(solved: &[&Solved], cfg: &ProtocolConfig) -> Outcome {
    let worst: Vec<f64> = solved
        .iter()
        .map(|s| chance_constraint_violation(s, cfg))
        .collect();
    let max = worst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let names: Vec<String> = solved
        .iter()
        .zip(&worst)
        .map(|(s, w)| format!("{}: {w:.3e}", s.case.name))
        .collect();
    check(
        max <= 1e-8,
        format!("max LHS − RHS {} (tol 1e-8)", names.join(", ")),
    )
}

fn privacy(solved: &[&Solved], cfg: &ProtocolConfig) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in solved {
        let audit = privacy_audit(&s.dist.ledgers);
        pass &= audit.is_clean();
        parts.push(format!(
            "{}: {} findings in {} messages",
            s.case.name,
            audit.findings.len(),
            audit.messages
        ));
    }
    let controls = [
        (
            "identity keys",
            ProtocolConfig {
                identity_keys: true,
                ..cfg.clone()
            },
        ),
        (
            "noise-free balance sum",
            ProtocolConfig {
                clear_balance_sum: true,
                ..cfg.clone()
            },
        ),
    ];
    for (label, control) in controls {
        let audit = privacy_audit(&run_protocol(&toy2(), &control).unwrap().ledgers);
        pass &= !audit.is_clean();
        parts.push(format!("{label}: {} findings", audit.findings.len()));
    }
    check(pass, parts.join(", "))
}

#[test]
fn acceptance() {
    let cfg = ProtocolConfig::default();
    let large = solve_both(case39(), &cfg);
    let small = solve_both(toy2(), &cfg);
    let results = [
        ("1 objective equivalence", objective_equivalence(&large)),
        ("2 schedule equivalence", schedule_equivalence(&large)),
        ("3 distributed inverse", inverse_accuracy()),
        ("4 encryption equivalence", encryption_equivalence()),
        ("5 consensus accuracy", consensus_accuracy()),
        (
            "6 chance constraints",
            chance_constraint_validity(&[&large, &small], &cfg),
        ),
        ("7 privacy audit", privacy(&[&large, &small], &cfg)),
    ];
    for (name, r) in &results {
        println!(
            "{} criterion {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    println!(
        "RECORDED criterion 8 absolute reproduction: published objective values and the \
         comparison against the alternative distributed method are not reproduced; case data, \
         regions and wind distributions are constructed, so criteria 1-7 compare against the \
         centralized solve"
    );
    let plain = formulate(&large.case, cfg.eps_b, cfg.alpha_s).unwrap();
    println!(
        "case {}: {} variables, {} constraints, {} monitored states",
        large.case.name,
        plain.qp.dim(),
        plain.qp.a.nrows(),
        plain.maps.len()
    );
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| !r.pass)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

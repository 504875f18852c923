//! Centralized formulation and solve of the dispatch QP with full access to
//! every region's data. Serves as the reference for the distributed run.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::dlpf::{assemble_dlpf, invert_oracle, mapping_coefficients, StateMaps};
use crate::error::{Error, Result};
use crate::grid_case::GridCase;
use crate::qp::{assemble_p0, solve_qp, CompactQp, QpSolution};
use crate::wind::{rhs_state, rhs_supply_demand};

/// The plain QP and the ingredients it was built from.
#[derive(Clone, Debug)]
pub struct Formulation {
    pub maps: StateMaps,
    /// Balance right-hand side per period.
    pub upsilon: Vec<f64>,
    /// State right-hand sides, period-major then by state.
    pub delta: Vec<f64>,
    pub qp: CompactQp,
}

pub fn check_probabilities(eps_b: f64, alpha_s: f64) -> Result<()> {
    for p in [eps_b, alpha_s] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Probability(p));
        }
    }
    Ok(())
}

pub fn formulate(case: &GridCase, eps_b: f64, alpha_s: f64) -> Result<Formulation> {
    check_probabilities(eps_b, alpha_s)?;
    let sys = assemble_dlpf(case)?;
    let blocks = invert_oracle(&sys)?;
    let maps = mapping_coefficients(&sys, &blocks, case)?;
    let upsilon = (0..case.horizon)
        .map(|t| rhs_supply_demand(case, eps_b, t))
        .collect::<Result<Vec<_>>>()?;
    let mut delta = Vec::with_capacity(case.horizon * maps.len());
    for t in 0..case.horizon {
        for s in 0..maps.len() {
            delta.push(rhs_state(case, &maps, alpha_s, s, t)?);
        }
    }
    let qp = assemble_p0(case, &maps, &upsilon, &delta)?;
    Ok(Formulation {
        maps,
        upsilon,
        delta,
        qp,
    })
}

#[derive(Clone, Debug)]
pub struct CentralizedRun {
    pub formulation: Formulation,
    pub solution: QpSolution,
    pub seconds: f64,
}

pub fn solve_centralized(
    case: &GridCase,
    eps_b: f64,
    alpha_s: f64,
    tol: f64,
) -> Result<CentralizedRun> {
    let start = Instant::now();
    let formulation = formulate(case, eps_b, alpha_s)?;
    let solution = solve_qp(&formulation.qp, tol)?;
    Ok(CentralizedRun {
        formulation,
        solution,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Generator outputs as a matrix: one row per generator in case order, one
/// column per period.
pub fn generator_schedule(case: &GridCase, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.len() != case.total_dim() {
        return Err(Error::Dimension(format!(
            "solution of length {} for {} variables",
            x.len(),
            case.total_dim()
        )));
    }
    let t = case.horizon;
    let mut out = DMatrix::zeros(case.generators.len(), t);
    let mut offset = 0;
    for r in 1..=case.regions {
        let ids: Vec<usize> = case
            .generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.region == r)
            .map(|(i, _)| i)
            .collect();
        for p in 0..t {
            for (local, &g) in ids.iter().enumerate() {
                out[(g, p)] = x[offset + p * ids.len() + local];
            }
        }
        offset += ids.len() * t;
    }
    Ok(out)
}

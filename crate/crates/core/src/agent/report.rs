//! Machine-readable summary of a centralized and/or distributed run.

use serde::Serialize;

use super::{privacy_audit, AuditReport, ProtocolConfig, ProtocolRun, StageRounds, StepTimings};
use crate::central::{generator_schedule, CentralizedRun, Formulation};
use crate::error::Result;
use crate::grid_case::GridCase;
use crate::qp::{check_kkt, KktReport};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CentralizedSummary {
    pub objective: f64,
    pub kkt: KktReport,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributedSummary {
    /// Plain objective at the concatenated decrypted schedules.
    pub objective: f64,
    pub encrypted_objective: f64,
    /// Plain problem's KKT residuals at the decrypted schedules and the
    /// multipliers mapped back by their owners.
    pub kkt: KktReport,
    pub encrypted_kkt: KktReport,
    pub qp_iterations: usize,
    pub problems_identical: bool,
    pub timings: StepTimings,
    pub stages: Vec<StageRounds>,
    pub messages: usize,
    pub audit: AuditReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// `|f_dist − f_cent| / |f_cent|`
    pub objective_rel_error: f64,
    /// Largest absolute difference of any generator output in any period.
    pub max_schedule_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub case: String,
    pub regions: usize,
    pub horizon: usize,
    pub generators: usize,
    pub variables: usize,
    pub constraints: usize,
    pub monitored_states: usize,
    pub eps_b: f64,
    pub alpha_s: f64,
    pub seed: u64,
    pub centralized: Option<CentralizedSummary>,
    pub distributed: Option<DistributedSummary>,
    pub comparison: Option<Comparison>,
}

impl RunReport {
    /// `plain` is the centralized formulation the distributed result is
    /// checked against.
    pub fn new(
        case: &GridCase,
        cfg: &ProtocolConfig,
        plain: &Formulation,
        centralized: Option<&CentralizedRun>,
        distributed: Option<&ProtocolRun>,
    ) -> Result<Self> {
        let qp = &plain.qp;
        let cent = centralized.map(|c| CentralizedSummary {
            objective: c.solution.objective,
            kkt: c.solution.kkt.clone(),
            iterations: c.solution.iterations,
            seconds: c.seconds,
        });
        let dist = distributed.map(|d| {
            let x = d.concatenated();
            DistributedSummary {
                objective: qp.objective(&x),
                encrypted_objective: d.encrypted_objective,
                kkt: check_kkt(qp, &x, &d.multipliers),
                encrypted_kkt: d.encrypted_kkt.clone(),
                qp_iterations: d.qp_iterations,
                problems_identical: d.problems_identical(),
                timings: d.timings.clone(),
                stages: d.stages.clone(),
                messages: d.ledgers.iter().map(|l| l.records().len()).sum(),
                audit: privacy_audit(&d.ledgers),
            }
        });
        let comparison = match (centralized, distributed, &cent, &dist) {
            (Some(c), Some(d), Some(cs), Some(ds)) => {
                let a = generator_schedule(case, &c.solution.x)?;
                let b = generator_schedule(case, &d.concatenated())?;
                Some(Comparison {
                    objective_rel_error: (ds.objective - cs.objective).abs() / cs.objective.abs(),
                    max_schedule_deviation: (a - b).amax(),
                })
            }
            _ => None,
        };
        Ok(Self {
            case: case.name.clone(),
            regions: case.regions,
            horizon: case.horizon,
            generators: case.generators.len(),
            variables: qp.dim(),
            constraints: qp.a.nrows(),
            monitored_states: plain.maps.len(),
            eps_b: cfg.eps_b,
            alpha_s: cfg.alpha_s,
            seed: cfg.seed,
            centralized: cent,
            distributed: dist,
            comparison,
        })
    }
}

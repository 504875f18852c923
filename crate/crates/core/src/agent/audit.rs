//! Privacy audit over the ledgers of a completed run.

use serde::Serialize;

use super::bus::AgentLedger;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    /// A payload contains a tagged confidential array verbatim.
    RawEquality,
    /// A payload contains private key material verbatim.
    KeyExposure,
    /// A payload class outside the masked whitelist.
    UnmaskedClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub sender: usize,
    pub receiver: usize,
    pub round: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub messages: usize,
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }
}

/// Checks every recorded message: no verbatim confidential array, no key
/// material, and only whitelisted payload classes.
pub fn privacy_audit(ledgers: &[AgentLedger]) -> AuditReport {
    let mut report = AuditReport::default();
    for ledger in ledgers {
        for r in ledger.records() {
            report.messages += 1;
            for e in &r.exposures {
                report.findings.push(Finding {
                    kind: if e.key {
                        FindingKind::KeyExposure
                    } else {
                        FindingKind::RawEquality
                    },
                    sender: r.sender,
                    receiver: r.receiver,
                    round: r.round,
                    detail: format!("region {} {}", e.owner, e.label),
                });
            }
            if !r.class.is_whitelisted() {
                report.findings.push(Finding {
                    kind: FindingKind::UnmaskedClass,
                    sender: r.sender,
                    receiver: r.receiver,
                    round: r.round,
                    detail: format!("{:?}", r.class),
                });
            }
        }
    }
    report
}

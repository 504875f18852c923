use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("case has no slack bus")]
    MissingSlack,
    #[error("communication topology over regions is disconnected")]
    DisconnectedTopology,
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular matrix: condition estimate {condition:.3e} exceeds {limit:.1e}")]
    Singular { condition: f64, limit: f64 },
    #[error("probability {0} outside the open interval (0, 1)")]
    Probability(f64),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("unknown monitored state: {0}")]
    UnknownState(String),
    #[error("QP is infeasible: {0}")]
    Infeasible(String),
    #[error("QP solver failed: {0}")]
    Numerical(String),
    #[error(
        "consensus did not converge after {iterations} iterations (deviation {deviation:.3e})"
    )]
    NonConvergence { iterations: usize, deviation: f64 },
    #[error("invalid consensus configuration: {0}")]
    Consensus(String),
    #[error("key generation exhausted {attempts} attempts below condition limit {limit:.1e}")]
    KeyGeneration { attempts: usize, limit: f64 },
    #[error("missing share from region {0}")]
    MissingShare(usize),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("protocol step out of order: {0}")]
    OutOfOrder(String),
    #[error("protocol aborted in phase {phase}: {source}")]
    Protocol {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str) -> Error {
        match self {
            e @ Error::Protocol { .. } => e,
            e => Error::Protocol {
                phase,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::Infeasible(_)
            | Error::Numerical(_)
            | Error::NonConvergence { .. }
            | Error::KeyGeneration { .. } => true,
            Error::Protocol { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

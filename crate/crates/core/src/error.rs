use thiserror::Error;

/// Unified error type for construction, integration, solving, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A state passed to an operation lies outside the declared state domain.
    #[error("state outside domain: {what}")]
    Domain { what: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A forward-integrated backup flow left the inflated state domain.
    #[error("backup flow escaped the inflated state domain at tau = {tau:.6}")]
    FlowEscape { tau: f64 },

    /// The QP active-set iteration exceeded its cap without converging.
    /// Distinct from infeasibility, which is a normal solver outcome.
    #[error("QP solver stalled after {0} iterations")]
    SolverStalled(usize),

    /// Requested an operation outside its supported range.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid parameter or configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Attempted to serialize a record with no steps.
    #[error("empty simulation record")]
    EmptyRecord,

    /// Malformed log content.
    #[error("parse: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

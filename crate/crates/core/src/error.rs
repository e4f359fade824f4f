use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or lengths that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// A non-finite value appeared where a finite one was required.
    #[error("divergence at {location}: {detail}")]
    Divergence { location: String, detail: String },

    /// An operation was invoked in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The constraint Jacobian lost full row rank (LICQ fails).
    #[error("constraint qualification failed: {0}")]
    ConstraintQualification(String),

    #[error("projection did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// The bordered KKT matrix of the sensitivity system is singular.
    #[error("non-degeneracy failed: {0}")]
    NonDegeneracy(String),

    /// Every fault found while validating a configuration.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn divergence(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Divergence { location: location.into(), detail: detail.into() }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

use thiserror::Error;

/// Errors raised by the flow library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },

    #[error("lambda = {0} lies outside [0, 1]")]
    LambdaRange(f64),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("{0} contains non-finite entries")]
    NonFinite(&'static str),

    #[error("inadmissible flow parameter{}: min eigenvalue {min_eigenvalue:e}", lambda.map(|l| format!(" at lambda = {l}")).unwrap_or_default())]
    Inadmissible { lambda: Option<f64>, min_eigenvalue: f64 },

    #[error("singular linear system: {0}")]
    Singular(&'static str),

    #[error("divergence at step {step} (lambda = {lambda}){}", particle.map(|p| format!(" in particle {p}")).unwrap_or_default())]
    Divergence { step: usize, lambda: f64, particle: Option<usize> },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("grid: {0}")]
    Grid(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("verdict changed under grid refinement: {0}")]
    GridSensitive(&'static str),

    #[error("sequential step {step}: {source}")]
    AtStep { step: usize, source: Box<FlowError> },
}

impl FlowError {
    pub(crate) fn with_particle(self, index: usize) -> Self {
        match self {
            FlowError::Divergence { step, lambda, .. } => FlowError::Divergence { step, lambda, particle: Some(index) },
            other => other,
        }
    }

    /// The underlying error with any step context stripped.
    pub fn root(&self) -> &FlowError {
        match self {
            FlowError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;

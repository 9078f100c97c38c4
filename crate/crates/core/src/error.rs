use thiserror::Error;

pub type Result<T, E = DeqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DeqError {
    /// Malformed or out-of-range arguments.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// An iterative method ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// `‖W‖₂` is not below one, so the equilibrium is not guaranteed to exist.
    #[error("ill-posed model: spectral norm of W is {spec_norm} (must be < {bound})")]
    WellPosedness { spec_norm: f64, bound: f64 },

    /// Data or parameters violate a standing assumption of the theory.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// A runtime monitor of a theoretical guarantee failed.
    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// A failure that happened at a specific gradient-descent step.
    #[error("at training step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<DeqError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DeqError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        DeqError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Strips any `AtStep` wrappers.
    pub fn root(&self) -> &DeqError {
        match self {
            DeqError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// Divergence is reported as an error value rather than a panic: for several
/// experiments a blown-up trajectory is the finding, not a bug.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NonConvergence { estimate: f64, iterations: usize },

    #[error("non-finite values produced by {origin}")]
    Divergence { origin: String },

    #[error("estimator degenerate: {0}")]
    Degenerate(String),

    #[error("contraction violated at layer {layer}: {product} > 1")]
    ContractionViolated { layer: usize, product: f64 },

    #[error("covering series diverges: {0}")]
    SeriesDivergent(String),

    #[error("missing evidence: {0}")]
    MissingEvidence(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn divergence(origin: impl Into<String>) -> Self {
        Error::Divergence {
            origin: origin.into(),
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

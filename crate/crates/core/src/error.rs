use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is numerically singular (pivot {pivot:e} below threshold {threshold:e})")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("sensitivity matrix is singular at the current iterate")]
    SingularSensitivity,

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value while evaluating {0}")]
    NonFiniteEvaluation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("value function estimate failed: no start converged")]
    ValueFunctionFailure,

    #[error("grid oracle is intractable for {0} variables (limit 4)")]
    IntractableDimension(usize),

    #[error("grid oracle found no feasible point")]
    NoFeasiblePoint,

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::ShapeMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

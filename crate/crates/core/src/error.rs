//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid weight: {0}")]
    InvalidWeight(String),

    #[error("region extends outside the domain: {0}")]
    RegionOutsideDomain(String),

    #[error("derivative of the degenerate weight requested at the singular point")]
    SingularPoint,

    #[error("not an A_p weight for this p: exponent {alpha} with p = {p} diverges on cubes containing the origin")]
    NotApWeight { alpha: f64, p: f64 },

    #[error("field is identically zero")]
    ZeroField,

    #[error(
        "conjugate gradient did not converge: {iterations} iterations, relative residual {relative_residual:.3e} (target {tolerance:.3e})"
    )]
    CgDidNotConverge {
        iterations: usize,
        relative_residual: f64,
        tolerance: f64,
    },

    #[error("eigensolver did not converge after {iterations} iterations; residual history tail {history:?}")]
    EigenDidNotConverge { iterations: usize, history: Vec<f64> },

    #[error(
        "auxiliary function construction failed: gradient floor {gradient_floor:.3e} at {offending} vertices outside the admissible critical set"
    )]
    EtaConstruction { gradient_floor: f64, offending: usize },

    #[error("weight overflow regime: {0}")]
    WeightOverflow(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("convergence study failed: {0}")]
    StudyFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

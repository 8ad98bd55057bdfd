use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("tensor Gauss-Hermite rule requested in dimension {0} (at most 4 supported)")]
    DimensionTooLarge(usize),

    #[error("shift is not in the Cameron-Martin space: relative residual {residual:e}")]
    NotInCameronMartin { residual: f64 },

    #[error("control image not contained in the covariance image at t = {t}: relative residual {residual:e}")]
    InclusionViolated { t: f64, residual: f64 },

    #[error("Kalman rank {rank} < {n} and the control image is not reachable by the noise")]
    RankDeficient { rank: usize, n: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("could not parse configuration: {0}")]
    ConfigParse(String),

    #[error("iterates live on different grids")]
    GridMismatch,

    #[error("point lies outside the solution grid (coordinate {axis}: {value} not in [{lo}, {hi}])")]
    OutOfGrid { axis: usize, value: f64, lo: f64, hi: f64 },

    #[error("time to horizon {remaining:e} is below the first gradient node {first_node:e}")]
    TooCloseToHorizon { remaining: f64, first_node: f64 },

    #[error("Picard iteration is not contracting: ratios {ratios:?}")]
    NoContraction { ratios: Vec<f64>, residual: f64 },

    #[error("Picard iteration stopped after {iterations} iterations with residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64, ratios: Vec<f64> },

    #[error("value {value} exceeds cost of policy '{policy}' ({mean} + 3 x {std_error})")]
    DominanceViolated { policy: String, value: f64, mean: f64, std_error: f64 },

    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

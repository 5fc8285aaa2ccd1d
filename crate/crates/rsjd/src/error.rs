use thiserror::Error;

/// Library-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("switching matrix row {row} sums to {sum:.6e} at x = {at:?}; rows must sum to 0 within {tol:.0e}")]
    RowSumViolation {
        row: usize,
        sum: f64,
        at: Vec<f64>,
        tol: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state became non-finite at t = {t:.6}")]
    NonFiniteState { t: f64 },

    #[error("observed switch rate {observed:.6} exceeds declared bound {bound:.6} at t = {t:.6}")]
    SwitchRateBoundExceeded { observed: f64, bound: f64, t: f64 },

    #[error("kill rate must be nonnegative, found q_kk = {value:.6} > 0 at t = {t:.6}")]
    PositiveKillRate { value: f64, t: f64 },

    #[error("jump-integral variance does not stabilize under sample doubling ({context})")]
    VarianceUnstable { context: String },

    #[error("matrix a - lambda0*I is not positive semidefinite: eigenvalue {eigenvalue:.6e}")]
    NotPositiveSemidefinite { eigenvalue: f64 },

    #[error("no contraction radius: the continuity modulus does not decay below the ellipticity margin on (0, {delta0}]")]
    NoContractionRadius { delta0: f64 },

    #[error("modulus is not integrable enough near zero for the distance transform ({0})")]
    ModulusNotIntegrable(String),

    #[error("horizon {budget:.3} too short: tail tolerance needs t_max >= {needed:.3}")]
    TailTolUnreachable { needed: f64, budget: f64 },

    #[error("spatial mesh supports dimension <= 2, model has d = {dim}")]
    MeshDimension { dim: usize },

    #[error("series requires alpha >= {alpha_min:.6}, got {alpha:.6}")]
    AlphaTooSmall { alpha: f64, alpha_min: f64 },

    #[error("transition series truncation order must be <= 2, got {0}")]
    TruncationTooLarge(usize),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

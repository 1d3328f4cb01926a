use thiserror::Error;

/// Errors raised by model construction, fitting and evaluation.
#[derive(Debug, Error)]
pub enum GmfError {
    #[error("invalid mean {mu} for the {family} family")]
    InvalidMean { family: &'static str, mu: f64 },

    #[error("invalid response {y} for the {family} family")]
    InvalidResponse { family: &'static str, y: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported family `{0}`")]
    UnsupportedFamily(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("latent scores are rank deficient (min eigenvalue {min_eigenvalue:e})")]
    DegenerateLatent { min_eigenvalue: f64 },

    #[error("ridge system is singular; use a positive latent penalty")]
    RidgeSingular,

    #[error("weighted normal equations are singular for column {0}")]
    ColumnDegenerate(usize),

    #[error("line search called without a descent direction (slope {0:e})")]
    LineSearchMisuse(f64),

    #[error("undefined null-deviance fraction: null deviance is zero")]
    UndefinedFraction,

    #[error("undefined AUC: only one class present")]
    UndefinedAuc,

    #[error("covariance matrix is not symmetric positive definite")]
    NonSpd,

    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool error: {0}")]
    ThreadPool(String),
}

impl GmfError {
    /// True for errors that stem from bad user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            GmfError::NumericalOverflow(_)
                | GmfError::DegenerateLatent { .. }
                | GmfError::RidgeSingular
                | GmfError::ColumnDegenerate(_)
                | GmfError::LineSearchMisuse(_)
                | GmfError::BootstrapUnstable { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, GmfError>;

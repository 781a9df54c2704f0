use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time step {dt:e} s exceeds the stability limit {limit:e} s for v_max = {v_max} m/s")]
    CflViolation { dt: f64, limit: f64, v_max: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("position ({0}, {1}) lies outside the grid")]
    OutOfGrid(usize, usize),
    #[error("receiver position ({0}, {1}) requested twice")]
    DuplicateReceiver(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("iteration diverged: {0}")]
    Diverged(String),
    #[error("all symbols are zero; power and SNR are undefined")]
    AllZero,
    #[error("symbol length mismatch: {0}")]
    LengthMismatch(String),
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),
    #[error("unknown scheme id `{given}`; valid ids: {valid}")]
    UnknownScheme { given: String, valid: String },
    #[error("probability table sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("decoder assigns zero probability where the joint is positive at {0}")]
    SupportViolation(String),
    #[error("reference has zero norm")]
    ZeroReference,
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("dataset version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("bad architecture: {0}")]
    BadArchConfig(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of size {0} is too small for batch statistics")]
    DegenerateBatch(usize),
    #[error("gradient check failed at {name}[{index}]: analytic {analytic:e}, numeric {numeric:e}, rel err {rel_err:e}")]
    ToleranceExceeded {
        name: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum LpsError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("loss must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
    #[error("degenerate input: norm {norm} below threshold {threshold}")]
    DegenerateNorm { norm: f64, threshold: f64 },
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("file format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("metrics error at line {line}: {reason}")]
    Metrics { line: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted at step {step}: non-finite loss in {phase}")]
    NanAbort { step: u64, phase: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LpsError>;

use thiserror::Error;

/// Errors produced anywhere in the recognizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("letter index {index} outside vocabulary of {size} letters")]
    Vocabulary { index: usize, size: usize },
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, utterance {utterance}: loss is not finite")]
    Diverged { epoch: usize, utterance: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Load/store failures for the binary checkpoint format. Each corruption
/// class gets its own variant so callers can tell them apart.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"MEMR\")")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },
    #[error("trailing bytes after the last entry")]
    TrailingBytes,
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint entry {0} does not exist in the model")]
    UnknownParam(String),
    #[error("model parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter name is not valid utf-8")]
    BadName,
}

pub type Result<T> = std::result::Result<T, Error>;

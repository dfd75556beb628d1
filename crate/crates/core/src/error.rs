use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("query row {row} has no permitted key")]
    FullyBannedRow { row: usize },

    #[error("zero-length row")]
    EmptyRow,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad magic bytes")]
    MagicMismatch,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor name sets differ: {0}")]
    NameSetMismatch(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("cut layer {k} outside [1, {max}]")]
    CutLayer { k: usize, max: usize },

    #[error("invalid merge spec: {0}")]
    MergeSpec(String),

    #[error("task generation: {0}")]
    Task(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("prune/mask equivalence violated: max abs diff {diff:e} at k={k}")]
    PruneMismatch { k: usize, diff: f64 },

    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<Checkpoint> },

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::FullyBannedRow { .. } => "fully_banned_row",
            Error::EmptyRow => "empty_row",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::MagicMismatch => "magic_mismatch",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::DuplicateName(_) => "duplicate_name",
            Error::NameSetMismatch(_) => "name_set_mismatch",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::CutLayer { .. } => "cut_layer",
            Error::MergeSpec(_) => "merge_spec",
            Error::Task(_) => "task",
            Error::Eval(_) => "eval",
            Error::PruneMismatch { .. } => "prune_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::DigestMismatch(_) => "digest_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

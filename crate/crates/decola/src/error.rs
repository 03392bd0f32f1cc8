//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecolaError {
    #[error("non-finite coordinate in box {index}: {coords:?}")]
    NonFiniteBox { index: usize, coords: [f64; 4] },

    #[error("box {index} violates {format} invariant: {coords:?}")]
    InvalidBox {
        index: usize,
        format: &'static str,
        coords: [f64; 4],
    },

    #[error("box format mismatch: expected {expected}, got {got}")]
    FormatMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown attribute token `{token}` in class name `{name}`")]
    UnknownAttribute { token: String, name: String },

    #[error("unknown class `{name}`")]
    UnknownClass { name: String },

    #[error("image too small: {height}x{width}, minimum side is {min_side}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min_side: usize,
    },

    #[error("top-k request k={k} exceeds {available} available locations")]
    TopKTooLarge { k: usize, available: usize },

    #[error("empty conditioning set")]
    EmptyConditioning,

    #[error("query blocks are not contiguous: block id {block} reappears at query {index}")]
    NonContiguousBlocks { block: usize, index: usize },

    #[error("NaN in cost matrix at ({row}, {col})")]
    NanCost { row: usize, col: usize },

    #[error("detection limit must be positive, got {0}")]
    InvalidDetectionLimit(i64),

    #[error("manifest schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("vocabulary hash mismatch: checkpoint has {checkpoint}, manifest has {manifest}")]
    VocabHashMismatch {
        checkpoint: String,
        manifest: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is not finite; last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<String>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to read hidden ground-truth sidecar through the manifest loader: {0}")]
    HiddenGtRefused(String),

    #[error("image decode error for `{path}`: {message}")]
    ImageDecode { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DecolaError>;

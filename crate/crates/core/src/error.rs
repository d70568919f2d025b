//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("attention: batch row {batch_row} has zero unmasked keys")]
    DegenerateAttention { batch_row: usize },

    #[error("backward: root must be scalar-shaped, got shape {shape}")]
    NonScalarRoot { shape: String },

    #[error("backward: root tensor is not recorded on this tape")]
    RootNotOnTape,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("image dims {h}x{w} not divisible by patch size {patch}")]
    PatchGeometry { h: usize, w: usize, patch: usize },

    #[error("parameter {name}: checkpoint shape {checkpoint:?} does not match model shape {model:?}")]
    ParamShapeMismatch {
        name: String,
        checkpoint: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("optimizer: trainable parameter {name} has no gradient")]
    MissingGradient { name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training aborted at step {step}: non-finite loss (last good checkpoint: {last_good:?})")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<std::path::PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

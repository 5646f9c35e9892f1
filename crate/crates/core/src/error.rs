//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants carry enough context to name the
/// offending dimension, parameter or file.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("conv2d: output dimension {dim} would be {value} (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    DegenerateConvOutput {
        dim: &'static str,
        value: i64,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("batchnorm: train mode needs at least 2 elements per channel, got {elements}")]
    BatchTooSmall { elements: usize },

    #[error("batchnorm: non-finite batch statistics in channel {channel} (mean {mean}, var {var})")]
    NonFiniteStats { channel: usize, mean: f32, var: f32 },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("backward: graph corruption: node {node} lists parent {parent} that does not precede it")]
    GraphCorruption { node: usize, parent: usize },

    #[error("backward: tensor has no graph node (was it created outside the graph?)")]
    DetachedTensor,

    #[error("sgd: non-finite update for parameter '{name}' (v={velocity}, grad={grad})")]
    NonFiniteUpdate {
        name: String,
        velocity: f32,
        grad: f32,
    },

    #[error("training aborted: non-finite loss at epoch {epoch} step {step}\n{diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("export: layer '{layer}' would lose all channels at threshold {tau}; lower tau or retrain")]
    DegenerateLayer { layer: String, tau: f32 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: bad magic number: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("{path}: truncated: needed {needed} bytes, file has {got}")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },

    #[error("idx: image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint: missing tensor '{0}'")]
    MissingTensor(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn shape(
        op: &'static str,
        what: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            what,
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("matmul: inner dimensions disagree, left is {m}x{k}, right is {k2}x{n}")]
    MatmulDimMismatch {
        m: usize,
        k: usize,
        k2: usize,
        n: usize,
    },

    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("log: negative input {value} at flat index {index}")]
    LogOfNegative { index: usize, value: f64 },

    #[error("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },

    #[error("backward: loss must be a scalar, got {elements} elements")]
    NonScalarLoss { elements: usize },

    #[error("adam: parameter '{name}' has no gradient")]
    MissingGrad { name: String },

    #[error("to_polar: r_max {r_max} exceeds half the image size ({size})")]
    RadiusTooLarge { r_max: f64, size: usize },

    #[error("split '{split}' is empty")]
    EmptySplit { split: String },

    #[error("split fractions {fractions:?} must be non-negative and sum to 1")]
    InvalidSplitFractions { fractions: Vec<f64> },

    #[error("checkpoint not found: {path}")]
    MissingCheckpoint { path: String },

    #[error("checkpoint is malformed: {reason}")]
    BadCheckpoint { reason: String },

    #[error("votes csv, line {line}: {reason}")]
    CsvRow { line: usize, reason: String },

    #[error("images referenced by the votes csv are missing: {ids:?}")]
    MissingImages { ids: Vec<String> },

    #[error("dataset at '{path}' is missing or malformed: {reason}")]
    BadDataset { path: String, reason: String },

    #[error("results file: {reason}")]
    BadResults { reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
}

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- tensor ----
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {got} does not match shape (expected {expected})")]
    DataLength { expected: usize, got: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("conv2d: invalid geometry along {axis}: input {input}, kernel {kernel}, stride {stride}, padding {padding} ({reason})")]
    ConvGeometry {
        axis: char,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        reason: &'static str,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{what}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    // ---- quantizer ----
    #[error("codebook has no entries")]
    EmptyCodebook,
    #[error("code {code} out of range for codebook size {k}")]
    CodeOutOfRange { code: usize, k: usize },

    // ---- mqvae ----
    #[error("input shape {got:?} does not match configured {expected:?} (channels, height, width)")]
    ResolutionMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("keep fraction {alpha} of {len} positions selects zero features")]
    EmptySelection { alpha: f64, len: usize },
    #[error("selection carries {positions} positions but {rows} feature rows")]
    PositionCountMismatch { positions: usize, rows: usize },

    // ---- stackformer ----
    #[error("{head} token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab {
        head: &'static str,
        token: usize,
        vocab: usize,
    },
    #[error("duplicate position {position} in sequence")]
    DuplicatePosition { position: usize },
    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    // ---- sampler ----
    #[error("cannot sample {steps} steps into a grid of {grid} positions without conflicts")]
    SampleStepsExceedGrid { steps: usize, grid: usize },
    #[error("invalid sampler configuration: {reason}")]
    InvalidSamplerConfig { reason: String },

    // ---- checkpoint ----
    #[error("checkpoint magic mismatch (found {found:?})")]
    CkptBadMagic { found: [u8; 8] },
    #[error("checkpoint version {found} not supported (expected {supported})")]
    CkptVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {context}")]
    CkptTruncated { context: &'static str },
    #[error("checkpoint field invalid: {context}")]
    CkptBadField { context: &'static str },
    #[error("checkpoint tensor `{name}` unknown to the receiving model")]
    CkptUnknownTensor { name: String },
    #[error("checkpoint is missing tensor `{name}` required by the model")]
    CkptMissingTensor { name: String },
    #[error("checkpoint tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    CkptShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint tensor `{name}` has a different dtype than the model")]
    CkptDtypeMismatch { name: String },
    #[error("config digest mismatch: checkpoint has {stored}, current config gives {current}")]
    ConfigDigestMismatch { stored: String, current: String },

    // ---- config ----
    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },
    #[error("invalid value `{value}` for config key `{key}`: {reason}")]
    InvalidConfigValue {
        key: String,
        value: String,
        reason: String,
    },

    // ---- data / image ----
    #[error("dataset error: {reason}")]
    Dataset { reason: String },
    #[error("image format error in `{path}`: {reason}")]
    ImageFormat { path: String, reason: String },

    // ---- training ----
    #[error("non-finite loss {value} at step {step}; aborting")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

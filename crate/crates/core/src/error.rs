use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Divisibility { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Shape),
    #[error("backward: loss is not recorded on this tape")]
    NotRecorded,
    #[error("backward: tape already consumed")]
    Consumed,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn divisibility(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Divisibility {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint config: {0}")]
    Config(String),
    #[error("parameter `{name}`: checkpoint shape {found:?} disagrees with config shape {expected:?}")]
    ShapeDisagreement {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("symbol {symbol} outside CDF support of {support} symbols")]
    SymbolOutOfSupport { symbol: usize, support: usize },
    #[error("range-coded stream truncated")]
    Truncated,
    #[error("range-coded stream corrupt")]
    Corrupt,
    #[error("{0} trailing bytes left after decoding")]
    TrailingBytes(usize),
    #[error("invalid CDF: {0}")]
    InvalidCdf(String),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BitstreamError {
    #[error("bad bitstream magic")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),
    #[error("bitstream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after bitstream payloads")]
    TrailingBytes(usize),
    #[error("bitstream was produced by config {stream:#04x}, model is {model:#04x}")]
    ConfigMismatch { stream: u8, model: u8 },
    #[error("image size {0}x{1} not representable in the header")]
    ImageTooLarge(usize, usize),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a PPM image: {0}")]
    Format(String),
    #[error("unsupported PPM maxval {0}")]
    MaxVal(u32),
    #[error("image data truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("RD curve needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("RD curve bit rates must be strictly increasing and positive")]
    NonMonotoneRate,
    #[error("RD curve quality values must be finite")]
    NonFiniteQuality,
    #[error("piecewise fit needs distinct quality values")]
    NonMonotoneQuality,
    #[error("curves overlap by {0:.3} dB, need at least 1 dB")]
    InsufficientOverlap(f64),
    #[error("unknown closed-form entry `{0}`")]
    UnknownEntry(String),
    #[error("closed-form dimensions must be positive")]
    NonPositiveDims,
    #[error("RD curve file {0}: {1}")]
    CurveFormat(String, String),
    #[error("no images found in {0}")]
    EmptyFolder(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used as a machine-readable prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Checkpoint(_) => "checkpoint",
            Error::Entropy(_) => "entropy",
            Error::Bitstream(_) => "bitstream",
            Error::Image(_) => "image",
            Error::Train(_) => "train",
            Error::Analysis(_) => "analysis",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

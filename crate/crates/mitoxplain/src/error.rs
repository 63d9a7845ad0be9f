//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// All failure modes of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tiff error: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("png error: {0}")]
    Png(#[from] image::ImageError),

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("channel '{channel}' is {found_h}x{found_w} but the stack is {expected_h}x{expected_w}")]
    ChannelShapeMismatch {
        channel: String,
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },

    #[error("duplicate channel name '{0}'")]
    DuplicateChannel(String),

    #[error("canonical channels missing in strict mode: {0:?}")]
    MissingCanonicalChannels(Vec<String>),

    #[error("page {0} has no entry in the channel map")]
    UnmappedPage(usize),

    #[error("channel '{0}' not present in stack")]
    UnknownChannel(String),

    #[error("channel selection is empty")]
    EmptyChannelSelection,

    #[error("unsupported pixel format in '{path}': expected unsigned 16-bit grayscale pages")]
    UnsupportedPixelFormat { path: PathBuf },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cannot split {have} patches into 3 partitions")]
    TooFewPatches { have: usize },

    #[error("cannot split {have} subject groups into 3 partitions")]
    TooFewGroups { have: usize },

    #[error("split ratios {0:?} do not sum to 1")]
    BadSplitRatios([f64; 3]),

    #[error("unsupported backbone '{0}'")]
    UnsupportedBackbone(String),

    #[error("layer {index} ({kind}) is not supported by this operation")]
    UnsupportedLayer { index: usize, kind: String },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}; aborting training")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("pretrained weights required for imagenet initialisation; pass a weights file")]
    MissingPretrainedWeights,

    #[error("input contains negative values; normalise the patch to [0, 1] first")]
    NegativeInput,

    #[error("prediction/label lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("ranking rows carry different seed counts")]
    RaggedRows,

    #[error("need at least 2 seed accuracies, got {0}")]
    TooFewSeeds(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("backward called on an empty tape (run a forward pass first)")]
    EmptyTape,
    #[error("backward root must be a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("layer {layer}: expected {expected} input features, found {found}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("batch has {inputs} inputs but {labels} labels")]
    BatchMismatch { inputs: usize, labels: usize },
    #[error("layer {layer}: weight and presence shapes differ ({weight:?} vs {presence:?})")]
    PresenceShape {
        layer: usize,
        weight: Vec<usize>,
        presence: Vec<usize>,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("network has no maskable weights")]
    NoWeights,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("pressure needs at least one maskable weight")]
    NoWeights,
    #[error("epoch {epoch} is beyond the curve horizon of {horizon} epochs")]
    BeyondHorizon { epoch: usize, horizon: usize },
    #[error("no pruning epochs remain (epoch {epoch} of {pruning_epochs})")]
    NoRemainingEpochs { epoch: usize, pruning_epochs: usize },
    #[error("density history is empty")]
    EmptyHistory,
    #[error("decay factor {0} outside (0, 1]")]
    InvalidDecay(f64),
    #[error("target density {0} outside (0, 100)")]
    InvalidTarget(f64),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("no active weights left to prune")]
    NoActiveWeights,
    #[error("prune fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point {index}: log-log fit needs positive saliency and density, got ({saliency}, {density})")]
    NonPositive {
        index: usize,
        saliency: f64,
        density: f64,
    },
    #[error("empty sequence")]
    Empty,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset kind '{0}' (expected blobs, spirals or xor-grid)")]
    InvalidKind(String),
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated IDX file")]
    Truncated { path: PathBuf },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad record: {0}")]
    BadRecord(String),
}

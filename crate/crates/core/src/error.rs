use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("circle mask needs a square image, got {height}x{width}")]
    NonSquareInput { height: usize, width: usize },

    #[error("grade {0} is outside 0..=4")]
    InvalidGrade(i64),
    #[error("class {0} has no samples")]
    EmptyClass(u8),
    #[error("resample index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("filter of extent {filter} does not fit a {width}x{height} input with padding {padding}")]
    FilterTooLarge {
        width: usize,
        height: usize,
        filter: usize,
        padding: usize,
    },
    #[error("pooling window {window} does not fit a {width}x{height} input")]
    WindowTooLarge {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("dense layer at position {0} is not preceded by a flatten or global pooling")]
    DenseBeforeFlatten(usize),
    #[error("layer chain is empty")]
    EmptyChain,

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("backbone `{0}` needs pretrained weights that are not bundled")]
    PretrainedUnavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("meta-model layer plan deviates from the reference order: {0}")]
    SpecOrderViolation(String),
    #[error("input must be {expected}x{expected}x3, got {height}x{width}x{channels}")]
    UnpreprocessedInput {
        expected: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("no samples to score")]
    EmptyInput,
    #[error("kappa denominator is zero but predictions disagree")]
    DegenerateMarginals,

    #[error("malformed csv {path}: {detail}")]
    MalformedCsv { path: PathBuf, detail: String },
    #[error("no valid records in {0}")]
    NoValidRecords(PathBuf),
    #[error("grade {grade} has {count} record(s); stratified split needs at least 2")]
    ClassTooSmall { grade: u8, count: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax over an empty row")]
    EmptySoftmaxRow,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("duplicate review id `{0}`")]
    DuplicateReviewId(String),

    #[error("review `{id}`: label {value} outside [1,7]")]
    LabelOutOfRange { id: String, value: i64 },

    #[error("unlabeled review `{0}`")]
    UnlabeledReview(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("batch has no maskable positions")]
    NoMaskablePositions,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no scorable tokens")]
    NothingToScore,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("experiment failed for seed {seed} ({condition}): {source}")]
    Experiment {
        seed: u64,
        condition: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

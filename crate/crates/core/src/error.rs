use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// The variants group into the classes the CLI maps onto exit codes:
/// configuration, I/O and parsing, checkpoints, and numeric failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("label {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("no embedding for utterance `{0}`")]
    Lookup(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr}): {detail}")]
    NumericFailure {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

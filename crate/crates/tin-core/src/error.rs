//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Attention or pooling over an empty behavior sequence.
    #[error("empty behavior sequence in {0}")]
    EmptySequence(&'static str),

    /// An id fell outside the table it indexes.
    #[error("lookup id {id} out of range for {table} (n_ids={n_ids})")]
    Lookup {
        table: &'static str,
        id: usize,
        n_ids: usize,
    },

    /// A text input failed to parse.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// No usable data after filtering.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Equal-frequency binning cannot be built from the given intervals.
    #[error("binning error: {0}")]
    Binning(String),

    /// A model configuration that cannot be instantiated.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// The requested measurement is not defined for this model variant.
    #[error("variant {0} is not supported by learned-correlation extraction")]
    UnsupportedVariant(String),

    /// A metric is undefined for the given records.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A forward pass, gradient check, or update produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// No grid cells could be populated.
    #[error("empty grid: {0}")]
    EmptyGrid(String),

    /// Checkpoint file malformed or inconsistent with the data it is used on.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

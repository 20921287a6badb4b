use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NstError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numerical error in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("empty window: {0}")]
    EmptyWindow(&'static str),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: row {row}, column {col}: cannot parse {value:?}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Layer {
        context: String,
        #[source]
        source: Box<NstError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NstError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NstError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Wraps an error with the name of the layer it came from.
    pub fn in_layer(self, context: impl Into<String>) -> Self {
        NstError::Layer {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dictionary has no atoms")]
    EmptyDictionary,

    #[error("singular local system in column {column}")]
    Singular { column: usize },

    #[error("point lies within {margin:e} of a Voronoi cell boundary")]
    Boundary { margin: f64 },

    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sampling stalled after {attempts} attempts in {check}")]
    SamplingStall { check: &'static str, attempts: usize },

    #[error("training diverged at step {step}: {what} = {value}")]
    Divergence {
        step: usize,
        what: &'static str,
        value: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn in_block(self, block: usize) -> Self {
        Error::Block {
            block,
            source: Box::new(self),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("missing column(s) {missing:?} in {path}; found {found:?}")]
    MissingColumns {
        path: PathBuf,
        missing: Vec<String>,
        found: Vec<String>,
    },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("value {value} outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("index {index} out of range for {table} with {rows} rows")]
    IndexOutOfRange {
        table: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("zero-norm vector in similarity")]
    ZeroNorm,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("non-finite activation in encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence {
        epoch: usize,
        history: Vec<crate::training::EpochRecord>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

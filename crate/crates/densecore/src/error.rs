//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion: input is missing declared mode column `{0}`")]
    MissingColumn(String),
    #[error("ingestion: {0}")]
    Ingest(String),
    #[error("label file: {0}")]
    Labels(String),
    #[error("config: {0}")]
    Config(String),
    #[error("tensor has no observed cells")]
    EmptyTensor,
    #[error(
        "tasks `{0}` and `{1}` share no commonly labeled entities; \
         supply an explicit task-correlation override"
    )]
    NoCommonLabels(String, String),
    #[error("non-finite value while updating {param} at iteration {iter}")]
    NonFinite { param: String, iter: u64 },
    #[error("fisher block for {0} has non-finite entries")]
    BadFisher(String),
    #[error("fisher block for {0} is not positive definite")]
    NotPositiveDefinite(String),
    #[error("no trained head for mode `{mode}`, task `{task}`")]
    NoHead { mode: String, task: String },
    #[error("metrics require at least one positive and one negative label")]
    DegenerateTruth,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("synthetic config: {0}")]
    Synthetic(String),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

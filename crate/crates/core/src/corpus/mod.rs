//! Dataset ingestion, the category taxonomy and stratified sampling.

mod dataset;
mod sample;
mod taxonomy;

use std::path::Path;

use thiserror::Error;

pub use dataset::{
    load_dataset, read_dataset, save_dataset, validate_record, write_dataset, DatasetSplit,
    ProductRecord, SplitRole,
};
pub use sample::{allocate, stratified_sample};
pub use taxonomy::{CategoryNode, Taxonomy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record '{id}': unknown leaf label '{label}'")]
    UnknownLabel { id: String, label: String },
    #[error("record '{id}': path {path} does not match taxonomy path {expected}")]
    PathMismatch {
        id: String,
        path: String,
        expected: String,
    },
    #[error("record '{0}': description is empty")]
    EmptyDescription(String),
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("sample size {target} is below the number of classes ({classes})")]
    SampleTooSmall { target: usize, classes: usize },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

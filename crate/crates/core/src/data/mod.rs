//! Records, label taxonomies, prompt sets, file formats and the synthetic
//! corpus generator.

mod embeddings;
mod jsonl;
mod record;
mod split;
mod synthetic;
mod taxonomy;

use std::path::Path;

pub use embeddings::ExternalEmbeddingTable;
pub use jsonl::{load_jsonl, load_jsonl_counting, save_jsonl};
pub use record::{stack_signals, EcgRecord, DEFAULT_FS, NUM_LEADS};
pub use split::{split, Split, SplitSpec};
pub use synthetic::{generate_synthetic, MIN_LENGTH};
pub use taxonomy::{ClassInfo, LabelTaxonomy, PromptSet, DEFAULT_TEMPLATE};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

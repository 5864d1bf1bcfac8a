//! Synthetic attribute-described person images and the on-disk dataset format.
//!
//! Every attribute group owns a rectangle of a small RGB canvas. Rendering is a
//! pure function of `(attributes, view, seed)`, so splits are reproducible and
//! can be rendered in parallel.

mod io;
mod render;
mod schema;
mod split;

use std::path::PathBuf;

use thiserror::Error;

use crate::Truncated;

pub use io::{
    read_dataset, write_dataset, ATTRIBUTES_FILE, IMAGES_FILE, IMAGES_MAGIC, IMAGES_VERSION,
    SPLIT_FILE,
};
pub use render::{mix_seed, PersonImage, RenderConfig, Renderer};
pub use schema::{
    assign_semantic_ids, AttributeGroup, AttributeSchema, AttributeVector, GroupKind, Pattern,
    Region, SemanticId,
};
pub use split::{make_split, DatasetSplit, Query, Sample, SplitConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema group {group}: {reason}")]
    InvalidSchema { group: usize, reason: String },
    #[error("attribute vector violates group {group}: {reason}")]
    InvalidAttributes { group: usize, reason: String },
    #[error("attribute vector has {got} slots, schema expects {expected}")]
    AttributeWidth { expected: usize, got: usize },
    #[error("requested {requested} semantic ids but the schema only realizes {max}")]
    InsufficientCombinations { requested: u128, max: u128 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: bad magic {found:?}")]
    BadMagic { file: &'static str, found: [u8; 4] },
    #[error("{file}: unsupported version {version}")]
    UnsupportedVersion { file: &'static str, version: u32 },
    #[error("{file}: {source}")]
    Truncated {
        file: &'static str,
        source: Truncated,
    },
    #[error("{file}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        file: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("{file} line {line}: {reason}")]
    Parse {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("{file}: {source}")]
    Json {
        file: &'static str,
        source: serde_json::Error,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

//! Corpus ingestion, feature files and synthetic turn-state corpora.

mod features;
mod manifest;
pub mod rng;
mod sample;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use features::{
    read_feature_header, read_features, read_features_with_dim, write_features, FeatureHeader, FeatureMatrix,
    DEFAULT_FRAME_PERIOD_MS, FEATURE_HEADER_LEN, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{
    load_manifest, load_samples, manifest_entry, sample_from_parts, write_corpus, ManifestEntry, ManifestStats,
    SampleDescriptor,
};
pub use sample::{validate_alignments, Sample, Source, Span, TurnState};
pub use synth::{
    make_incomplete, make_incomplete_with, synth_corpus, token_means, truncate_at, SynthConfig, TokenLayout,
    BLANK, EOT_TOKEN, FIRST_BACKCHANNEL, WAIT_TOKEN,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid features: {0}")]
    Features(String),
    #[error("bad magic: not a feature file")]
    BadMagic,
    #[error("truncated payload: header declares {expected_frames} frames, found {found_bytes} payload bytes")]
    Truncated { expected_frames: usize, found_bytes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("unknown turn state `{0}`")]
    UnknownTurnState(String),
    #[error("bad alignment: {0}")]
    Alignment(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("cannot truncate: {0}")]
    Truncation(String),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

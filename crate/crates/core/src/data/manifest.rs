//! JSON-lines corpus manifests.
//!
//! One object per line with required keys `id`, `turn_state`, `tokens`,
//! `alignments` (`[start, end)` frame pairs), `features` (path relative to
//! the manifest) and `source`. Unknown keys are kept in `extra` and ignored.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{read_feature_header, read_features, write_features};
use super::sample::validate_alignments;
use super::{DataError, FeatureMatrix, Sample, Source, TurnState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub turn_state: String,
    pub tokens: Vec<usize>,
    pub alignments: Vec<[usize; 2]>,
    pub features: String,
    pub source: Source,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A validated manifest line with its feature header resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDescriptor {
    pub line: usize,
    pub id: String,
    pub turn_state: TurnState,
    pub tokens: Vec<usize>,
    pub alignments: Vec<(usize, usize)>,
    pub features_path: PathBuf,
    pub num_frames: usize,
    pub dim: usize,
    pub frame_period_ms: f32,
    pub source: Source,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SampleDescriptor {
    pub fn duration_ms(&self) -> f64 {
        self.num_frames as f64 * self.frame_period_ms as f64
    }

    /// Reads the referenced feature file into a full [`Sample`].
    pub fn load(&self) -> Result<Sample, DataError> {
        let features = read_features(&self.features_path)?;
        let sample = Sample {
            id: self.id.clone(),
            turn_state: self.turn_state,
            tokens: self.tokens.clone(),
            alignments: self.alignments.clone(),
            features: Arc::new(features),
            source: self.source,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Per-state sample counts and durations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestStats {
    pub counts: BTreeMap<TurnState, usize>,
    pub duration_ms: BTreeMap<TurnState, f64>,
}

impl ManifestStats {
    pub fn from_descriptors(descs: &[SampleDescriptor]) -> Self {
        let mut s = ManifestStats::default();
        for d in descs {
            *s.counts.entry(d.turn_state).or_default() += 1;
            *s.duration_ms.entry(d.turn_state).or_default() += d.duration_ms();
        }
        s
    }

    pub fn count(&self, state: TurnState) -> usize {
        self.counts.get(&state).copied().unwrap_or(0)
    }

    pub fn hours(&self, state: TurnState) -> f64 {
        self.duration_ms.get(&state).copied().unwrap_or(0.0) / 3_600_000.0
    }
}

fn line_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Manifest {
        line,
        msg: msg.into(),
    }
}

fn parse_line(text: &str, line: usize, base: &Path) -> Result<SampleDescriptor, DataError> {
    let entry: ManifestEntry = serde_json::from_str(text).map_err(|e| line_err(line, e.to_string()))?;
    let turn_state: TurnState = entry
        .turn_state
        .parse()
        .map_err(|_| line_err(line, format!("unknown turn_state `{}`", entry.turn_state)))?;
    let features_path = base.join(&entry.features);
    let header = read_feature_header(&features_path).map_err(|e| line_err(line, e.to_string()))?;
    let alignments: Vec<(usize, usize)> = entry.alignments.iter().map(|[s, e]| (*s, *e)).collect();
    validate_alignments(entry.tokens.len(), &alignments, header.num_frames)
        .map_err(|msg| line_err(line, format!("alignment out of feature range: {msg}")))?;
    Ok(SampleDescriptor {
        line,
        id: entry.id,
        turn_state,
        tokens: entry.tokens,
        alignments,
        features_path,
        num_frames: header.num_frames,
        dim: header.dim,
        frame_period_ms: header.frame_period_ms,
        source: entry.source,
        extra: entry.extra,
    })
}

/// Parses and validates every non-blank line. Errors carry the 1-based line.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleDescriptor>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1, &base)?);
    }
    Ok(out)
}

/// Loads a manifest and all referenced features.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>, DataError> {
    load_manifest(path)?.iter().map(SampleDescriptor::load).collect()
}

pub fn manifest_entry(sample: &Sample, features_rel: &str) -> ManifestEntry {
    ManifestEntry {
        id: sample.id.clone(),
        turn_state: sample.turn_state.as_str().to_string(),
        tokens: sample.tokens.clone(),
        alignments: sample.alignments.iter().map(|(s, e)| [*s, *e]).collect(),
        features: features_rel.to_string(),
        source: sample.source,
        extra: serde_json::Map::new(),
    }
}

/// Writes `dir/manifest.jsonl` plus one feature file per sample under
/// `dir/features/`. Returns the manifest path.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<PathBuf, DataError> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| DataError::io(&feat_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for s in samples {
        let rel = format!("features/{}.ftfe", s.id);
        write_features(&dir.join(&rel), &s.features)?;
        let line = serde_json::to_string(&manifest_entry(s, &rel)).expect("manifest entry serializes");
        writeln!(out, "{line}").expect("write to Vec");
    }
    std::fs::write(&manifest, out).map_err(|e| DataError::io(&manifest, e))?;
    Ok(manifest)
}

/// Convenience for tests and tools: a sample whose features are given inline.
pub fn sample_from_parts(
    id: &str,
    turn_state: TurnState,
    tokens: Vec<usize>,
    alignments: Vec<(usize, usize)>,
    features: FeatureMatrix,
    source: Source,
) -> Result<Sample, DataError> {
    let s = Sample {
        id: id.to_string(),
        turn_state,
        tokens,
        alignments,
        features: Arc::new(features),
        source,
    };
    s.validate()?;
    Ok(s)
}

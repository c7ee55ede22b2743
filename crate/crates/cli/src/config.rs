//! The engine config file: one TOML document with a section per module and
//! the output locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use turnkit::duplex::SessionConfig;
use turnkit::{ModelConfig, SynthConfig, TrainConfig};

use crate::exit::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training manifest used by `train`.
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/train/manifest.jsonl"),
            checkpoints: PathBuf::from("run/checkpoints"),
            reports: PathBuf::from("run/reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub duplex: SessionConfig,
}

impl EngineConfig {
    /// Parses and validates `path`. Relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.checkpoints, &mut cfg.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.synth.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.duplex.validate().map_err(|e| e.to_string())?;
        turnkit::Model::new(self.model.clone()).map_err(|e| e.to_string())?;
        if self.synth.vocab_size != self.model.asr_vocab_size {
            return Err(format!(
                "synth.vocab_size {} differs from model.asr_vocab_size {}",
                self.synth.vocab_size, self.model.asr_vocab_size
            ));
        }
        if self.synth.feature_dim != self.model.encoder.input_dim {
            return Err(format!(
                "synth.feature_dim {} differs from model.encoder.input_dim {}",
                self.synth.feature_dim, self.model.encoder.input_dim
            ));
        }
        Ok(())
    }
}

//! The assembled engine: every module, its parameter namespaces and the
//! three decision paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{format_ctc_prompt, CtcError, CtcHead, GreedyState};
use crate::data::rng::derive_seed;
use crate::data::{DataError, TurnState};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, EncoderOutput};
use crate::fusion::{init_fusion, AcousticAdapter, FusionConfig, FusionError, TurnDetector};
use crate::langmodel::{
    AdapterConfig, LanguageModel, LlmAdapter, LmConfig, LmError, LmVocab, TurnPrediction, TEXT_LM_PREFIX,
};
use crate::nnkit::{NnError, ParameterSet, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which decision path the engine uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Greedy CTC transcript into the text-only LM.
    Cascaded,
    /// Adapted acoustic prefix plus CTC prompt into the LM.
    Semantic,
    /// Semantic LM hidden state fused with pooled intermediate acoustics.
    Unified,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Cascaded, Mode::Semantic, Mode::Unified];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cascaded => "cascaded",
            Mode::Semantic => "semantic",
            Mode::Unified => "unified",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown mode `{s}` (cascaded, semantic, unified)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Acoustic token alphabet including the blank.
    pub asr_vocab_size: usize,
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub llm_adapter: AdapterConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let asr_vocab_size = 24;
        Self {
            asr_vocab_size,
            encoder: EncoderConfig::default(),
            lm: LmConfig {
                vocab_size: LmVocab::new(asr_vocab_size).len(),
                ..LmConfig::default()
            },
            llm_adapter: AdapterConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

/// Class probabilities and the resulting state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub state: TurnState,
    pub probs: [f64; 4],
}

impl Decision {
    pub fn from_probs(probs: [f64; 4]) -> Self {
        Decision {
            state: crate::fusion::argmax_state(&probs),
            probs,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.state.index()]
    }
}

/// Streaming analysis of a whole utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub encoded: EncoderOutput,
    pub transcript: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: LmVocab,
    pub encoder: Encoder,
    pub ctc: CtcHead,
    pub lm: LanguageModel,
    pub text_lm: LanguageModel,
    pub llm_adapter: LlmAdapter,
    pub acoustic: AcousticAdapter,
    pub detector: TurnDetector,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        if cfg.asr_vocab_size < 2 {
            return Err(ModelError::Config("asr_vocab_size must include a blank and one token".into()));
        }
        let vocab = LmVocab::new(cfg.asr_vocab_size);
        if cfg.lm.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "lm.vocab_size {} does not match {} specials + {} acoustic tokens = {}",
                cfg.lm.vocab_size,
                crate::langmodel::NUM_SPECIALS,
                cfg.asr_vocab_size - 1,
                vocab.len()
            )));
        }
        let d = cfg.encoder.model_dim;
        let mut scratch = ParameterSet::new();
        let (acoustic, detector) = init_fusion(d, cfg.lm.model_dim, &cfg.fusion, &mut scratch, 0)?;
        Ok(Self {
            vocab,
            encoder: Encoder::new(cfg.encoder.clone())?,
            ctc: CtcHead::new(d, cfg.asr_vocab_size),
            lm: LanguageModel::new(cfg.lm.clone())?,
            text_lm: LanguageModel::with_prefix(cfg.lm.clone(), TEXT_LM_PREFIX)?,
            llm_adapter: LlmAdapter::new(d, cfg.lm.model_dim, &cfg.llm_adapter)?,
            acoustic,
            detector,
            cfg,
        })
    }

    /// Fresh parameters for every trainable module. The cascaded text LM is
    /// filled in when the text-only stage finishes.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet, ModelError> {
        let mut p = ParameterSet::new();
        self.encoder
            .init(&mut p, &mut crate::data::rng::seeded(derive_seed(seed, "encoder")))?;
        self.ctc.init(&mut p, derive_seed(seed, "ctc"))?;
        self.lm.init(&mut p, derive_seed(seed, "lm"))?;
        self.llm_adapter.init(&mut p, derive_seed(seed, "llm_adapter"))?;
        let mut rng = crate::data::rng::seeded(derive_seed(seed, "fusion"));
        self.acoustic.init(&mut p, &mut rng)?;
        self.detector.init(&mut p, &mut rng)?;
        self.snapshot_text_lm(&mut p);
        Ok(p)
    }

    /// Copies the current LM parameters into the cascaded baseline slot.
    pub fn snapshot_text_lm(&self, params: &mut ParameterSet) {
        let lm = params.subset("lm.");
        for (name, value) in lm.iter() {
            let target = format!("{TEXT_LM_PREFIX}.{}", &name["lm.".len()..]);
            params.set(&target, value.clone());
            params.set_trainable(&target, false).expect("exists");
        }
    }

    pub fn prompt(&self, transcript: &[usize]) -> Result<Vec<usize>, ModelError> {
        Ok(format_ctc_prompt(transcript, &self.vocab)?)
    }

    /// Streaming encoder pass plus greedy CTC over a whole utterance.
    pub fn analyze(&self, params: &ParameterSet, features: &Tensor) -> Result<Analysis, ModelError> {
        let encoded = self.encoder.encode_streaming(params, features)?;
        let lp = self.ctc.log_probs(params, &encoded.top)?;
        let mut greedy = GreedyState::new();
        greedy.step_all(&lp)?;
        Ok(Analysis {
            encoded,
            transcript: greedy.transcript,
        })
    }

    /// Keeps the prefix within the LM's position budget.
    fn fit_prefix(&self, top: &Tensor, prompt_len: usize) -> Tensor {
        let room = self.cfg.lm.max_positions.saturating_sub(prompt_len + 1);
        if top.rows() > room {
            top.slice_rows(top.rows() - room, room)
        } else {
            top.clone()
        }
    }

    /// Semantic-path LM prediction over the adapted prefix and prompt.
    pub fn semantic(
        &self,
        params: &ParameterSet,
        top: &Tensor,
        transcript: &[usize],
    ) -> Result<TurnPrediction, ModelError> {
        let prompt = self.prompt(transcript)?;
        let top = self.fit_prefix(top, prompt.len());
        let prefix = self.llm_adapter.adapt_acoustic(params, &top)?;
        Ok(self.lm.predict_turn(params, &prompt, Some(&prefix))?)
    }

    /// Decision of `mode` given encoder outputs and transcript so far.
    pub fn decide(
        &self,
        params: &ParameterSet,
        mode: Mode,
        encoded: &EncoderOutput,
        transcript: &[usize],
    ) -> Result<Decision, ModelError> {
        match mode {
            Mode::Cascaded => {
                let prompt = self.prompt(transcript)?;
                let p = self.text_lm.predict_turn(params, &prompt, None)?;
                Ok(Decision::from_probs(p.turn_probs()))
            }
            Mode::Semantic => Ok(Decision::from_probs(self.semantic(params, &encoded.top, transcript)?.turn_probs())),
            Mode::Unified => {
                let sem = self.semantic(params, &encoded.top, transcript)?;
                let acoustic = self.acoustic.acoustic_adapt(params, &encoded.mid)?;
                Ok(Decision::from_probs(self.detector.detect_turn(params, &acoustic, &sem.hidden)?))
            }
        }
    }

    /// Transcript by autoregressive decoding from the adapted acoustic
    /// prefix, in acoustic token ids.
    pub fn ar_transcript(&self, params: &ParameterSet, top: &Tensor, max_len: usize) -> Result<Vec<usize>, ModelError> {
        let top = self.fit_prefix(top, max_len + 1);
        let prefix = self.llm_adapter.adapt_acoustic(params, &top)?;
        let ids = self.lm.lm_decode_asr(params, &prefix, max_len)?;
        Ok(ids.into_iter().filter_map(|id| self.vocab.to_asr(id)).collect())
    }

    /// Cascaded decision over an autoregressively decoded transcript.
    pub fn decide_cascaded_ar(
        &self,
        params: &ParameterSet,
        top: &Tensor,
        max_len: usize,
    ) -> Result<(Decision, Vec<usize>), ModelError> {
        let transcript = self.ar_transcript(params, top, max_len)?;
        let prompt = self.prompt(&transcript)?;
        let p = self.text_lm.predict_turn(params, &prompt, None)?;
        Ok((Decision::from_probs(p.turn_probs()), transcript))
    }

    /// Analyze then decide, for offline evaluation of one sample.
    pub fn classify(&self, params: &ParameterSet, mode: Mode, features: &Tensor) -> Result<Decision, ModelError> {
        let a = self.analyze(params, features)?;
        self.decide(params, mode, &a.encoded, &a.transcript)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder = EncoderConfig {
            input_dim: 4,
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_hidden: 16,
            conv_kernel: 3,
            chunk_frames: 8,
            mid_layer_index: 1,
            ..EncoderConfig::default()
        };
        c.lm.model_dim = 8;
        c.lm.ffn_hidden = 16;
        c.lm.num_heads = 2;
        c.llm_adapter = AdapterConfig {
            num_layers: 1,
            num_heads: 2,
            ffn_hidden: 16,
            rel_max: Some(4),
        };
        c.fusion = FusionConfig {
            fusion_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_hidden: 16,
            rel_max: Some(4),
            detector_hidden: [8, 8],
        };
        c
    }

    #[test]
    fn all_modes_decide_on_untrained_model() {
        let m = Model::new(tiny_cfg()).unwrap();
        let p = m.init_params(0).unwrap();
        let x = Tensor::filled(&[20, 4], 0.1);
        for mode in Mode::ALL {
            let d = m.classify(&p, mode, &x).unwrap();
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(d, m.classify(&p, mode, &x).unwrap());
        }
    }

    #[test]
    fn text_lm_snapshot_is_frozen_copy() {
        let m = Model::new(tiny_cfg()).unwrap();
        let p = m.init_params(0).unwrap();
        assert_eq!(p.get("lm.head.w"), p.get("text_lm.head.w"));
        assert!(!p.is_trainable("text_lm.head.w"));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let mut c = tiny_cfg();
        c.lm.vocab_size += 1;
        assert!(matches!(Model::new(c), Err(ModelError::Config(_))));
        assert_eq!("unified".parse::<Mode>().unwrap(), Mode::Unified);
        assert!("fast".parse::<Mode>().is_err());
    }
}

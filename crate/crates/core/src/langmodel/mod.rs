//! Tiny causal language model, the LLM adapter and turn-token prediction.
//!
//! The LM has no absolute position embedding: attention carries a learned
//! relative-position bias, so a sequence means the same thing wherever it
//! starts. Each input row is mixed with a projection of its predecessor
//! before the first block, which makes copying from the prefix easy to learn.
//! Acoustic prefix embeddings occupy the first positions, followed by
//! embedded tokens.

mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TurnState;
use crate::nnkit::{
    AttnMask, Embedding, Graph, LayerNorm, Linear, NnError, ParameterSet, Tensor, TransformerStack, Var,
};

pub use vocab::{
    LmVocab, VocabEntry, BOS, CTC_CLOSE, CTC_OPEN, EOS, NUM_SPECIALS, SIL, SPECIALS, TURN_BASE,
};

pub const LM_PREFIX: &str = "lm";
/// Frozen copy of the text-only LM used by the cascaded baseline.
pub const TEXT_LM_PREFIX: &str = "text_lm";
pub const ADAPTER_PREFIX: &str = "llm_adapter";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("{got} positions exceed max_positions {max}")]
    PositionOverflow { got: usize, max: usize },
    #[error("input dim {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenRange(usize),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    /// Special plus content tokens.
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
    /// Clipping distance of the relative-position bias.
    pub rel_max: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: NUM_SPECIALS + 23,
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ffn_hidden: 128,
            max_positions: 256,
            rel_max: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    /// Relative-position clipping; `None` makes the adapter position-free.
    pub rel_max: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 128,
            rel_max: Some(16),
        }
    }
}

/// Graph handles of one LM pass.
#[derive(Debug, Clone, Copy)]
pub struct LmVars {
    /// `N x vocab` next-token logits.
    pub logits: Var,
    /// `N x model_dim` top-layer states after the final layer norm.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    embed: Embedding,
    shift: Linear,
    blocks: TransformerStack,
    final_ln: LayerNorm,
    head: Linear,
}

impl LanguageModel {
    pub fn new(cfg: LmConfig) -> Result<Self, LmError> {
        Self::with_prefix(cfg, LM_PREFIX)
    }

    /// An LM whose parameters live under `prefix`.
    pub fn with_prefix(cfg: LmConfig, prefix: &str) -> Result<Self, LmError> {
        if cfg.vocab_size < NUM_SPECIALS {
            return Err(LmError::Config(format!(
                "vocab_size {} smaller than the {NUM_SPECIALS} special tokens",
                cfg.vocab_size
            )));
        }
        if cfg.max_positions == 0 {
            return Err(LmError::Config("max_positions must be positive".into()));
        }
        let blocks = TransformerStack::new(
            &format!("{prefix}.blocks"),
            cfg.num_layers,
            cfg.model_dim,
            cfg.num_heads,
            cfg.ffn_hidden,
            Some(cfg.rel_max),
        )?;
        Ok(Self {
            embed: Embedding::new(format!("{prefix}.embed"), cfg.vocab_size, cfg.model_dim),
            shift: Linear::new(format!("{prefix}.shift"), cfg.model_dim, cfg.model_dim),
            blocks,
            final_ln: LayerNorm::new(format!("{prefix}.final_ln"), cfg.model_dim),
            head: Linear::new(format!("{prefix}.head"), cfg.model_dim, cfg.vocab_size),
            cfg,
        })
    }

    pub fn init(&self, params: &mut ParameterSet, seed: u64) -> Result<(), LmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.embed.init(params, &mut rng)?;
        self.shift.init(params, &mut rng)?;
        self.blocks.init(params, &mut rng)?;
        self.final_ln.init(params)?;
        self.head.init(params, &mut rng)?;
        Ok(())
    }

    /// Embedded tokens, checked against the vocabulary.
    pub fn embed(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var, LmError> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(LmError::TokenRange(t));
        }
        Ok(self.embed.forward(g, tokens)?)
    }

    /// Runs the causal stack over `[prefix ; embed(tokens)]`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], prefix: Option<Var>) -> Result<LmVars, LmError> {
        let hidden = self.hidden(g, tokens, prefix)?;
        let logits = self.head.forward(g, hidden)?;
        Ok(LmVars { logits, hidden })
    }

    /// Like [`forward`](Self::forward) without the output projection.
    pub fn hidden(&self, g: &mut Graph, tokens: &[usize], prefix: Option<Var>) -> Result<Var, LmError> {
        let p_len = prefix.map(|p| g.rows(p)).unwrap_or(0);
        let n = p_len + tokens.len();
        if n == 0 {
            return Err(LmError::Empty);
        }
        if n > self.cfg.max_positions {
            return Err(LmError::PositionOverflow {
                got: n,
                max: self.cfg.max_positions,
            });
        }
        if let Some(p) = prefix {
            if g.cols(p) != self.cfg.model_dim {
                return Err(LmError::DimMismatch {
                    got: g.cols(p),
                    expected: self.cfg.model_dim,
                });
            }
        }
        let x = match (prefix, tokens.is_empty()) {
            (Some(p), true) => p,
            (Some(p), false) => {
                let e = self.embed(g, tokens)?;
                g.concat_rows(&[p, e])?
            }
            (None, _) => self.embed(g, tokens)?,
        };
        let x = self.token_shift(g, x, n)?;
        let pos: Vec<i64> = (0..n as i64).collect();
        let h = self.blocks.forward(g, x, &pos, &AttnMask::Causal)?;
        Ok(self.final_ln.forward(g, h)?)
    }

    /// Adds a projection of each position's predecessor input row.
    fn token_shift(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var, LmError> {
        let zero = g.constant(Tensor::zeros(&[1, self.cfg.model_dim]));
        let prev = if n == 1 {
            zero
        } else {
            let head = g.slice_rows(x, 0, n - 1)?;
            g.concat_rows(&[zero, head])?
        };
        let s = self.shift.forward(g, prev)?;
        Ok(g.add(x, s)?)
    }

    /// Output projection of hidden rows.
    pub fn head(&self, g: &mut Graph, hidden: Var) -> Result<Var, LmError> {
        Ok(self.head.forward(g, hidden)?)
    }

    /// Next-token logits per position and the final hidden state, without
    /// gradients.
    pub fn lm_forward(
        &self,
        params: &ParameterSet,
        tokens: &[usize],
        prefix: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>), LmError> {
        let mut g = Graph::new(params);
        let p = prefix.filter(|p| p.rows() > 0).map(|p| g.constant(p.clone()));
        let v = self.forward(&mut g, tokens, p)?;
        let h = g.value(v.hidden);
        let last = h.row(h.rows() - 1).to_vec();
        Ok((g.value(v.logits).clone(), last))
    }

    /// Single forward pass over `[prefix ; <bos> ; prompt]`, read at the last
    /// position and restricted to the four turn tokens.
    pub fn predict_turn(
        &self,
        params: &ParameterSet,
        prompt: &[usize],
        prefix: Option<&Tensor>,
    ) -> Result<TurnPrediction, LmError> {
        let mut g = Graph::new(params);
        let p = prefix.filter(|p| p.rows() > 0).map(|p| g.constant(p.clone()));
        let tokens = turn_input(prompt);
        let h = self.hidden(&mut g, &tokens, p)?;
        let last = g.slice_rows(h, g.rows(h) - 1, 1)?;
        let logits = self.head(&mut g, last)?;
        let lp = g.log_softmax(logits)?;
        let lp = g.value(lp).data();
        let turn_log_probs = LmVocab::turn_tokens().map(|t| lp[t]);
        Ok(TurnPrediction {
            state: TurnState::from_index(argmax4(&turn_log_probs)).expect("four states"),
            hidden: g.value(last).data().to_vec(),
            turn_log_probs,
        })
    }

    /// Greedy decoding from `[prefix ; <bos>]` until `<eos>` or `max_len`
    /// tokens. The whole sequence is recomputed each step.
    pub fn lm_decode_asr(&self, params: &ParameterSet, prefix: &Tensor, max_len: usize) -> Result<Vec<usize>, LmError> {
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new(params);
            let p = (prefix.rows() > 0).then(|| g.constant(prefix.clone()));
            let h = self.hidden(&mut g, &tokens, p)?;
            let last = g.slice_rows(h, g.rows(h) - 1, 1)?;
            let logits = self.head(&mut g, last)?;
            let row = g.value(logits).data();
            let mut next = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[next] {
                    next = i;
                }
            }
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

fn argmax4(v: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// `<bos>` followed by the prompt.
pub fn turn_input(prompt: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(prompt.len() + 1);
    t.push(BOS);
    t.extend_from_slice(prompt);
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnPrediction {
    pub state: TurnState,
    /// Last-position top-layer state, consumed by the fusion detector.
    pub hidden: Vec<f64>,
    /// Full-vocabulary log-probabilities of the four turn tokens.
    pub turn_log_probs: [f64; 4],
}

impl TurnPrediction {
    /// Distribution renormalised over the four turn tokens.
    pub fn turn_probs(&self) -> [f64; 4] {
        let m = self.turn_log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = self.turn_log_probs.map(|v| (v - m).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }
}

/// Bidirectional transformer mapping encoder states into the LM input space,
/// one output row per input row.
#[derive(Debug, Clone)]
pub struct LlmAdapter {
    pub input_dim: usize,
    pub output_dim: usize,
    input: Linear,
    blocks: TransformerStack,
    ln: LayerNorm,
    output: Linear,
}

impl LlmAdapter {
    pub fn new(input_dim: usize, output_dim: usize, cfg: &AdapterConfig) -> Result<Self, LmError> {
        Ok(Self {
            input_dim,
            output_dim,
            input: Linear::new(format!("{ADAPTER_PREFIX}.input"), input_dim, output_dim),
            blocks: TransformerStack::new(
                &format!("{ADAPTER_PREFIX}.blocks"),
                cfg.num_layers,
                output_dim,
                cfg.num_heads,
                cfg.ffn_hidden,
                cfg.rel_max,
            )?,
            ln: LayerNorm::new(format!("{ADAPTER_PREFIX}.ln"), output_dim),
            output: Linear::new(format!("{ADAPTER_PREFIX}.output"), output_dim, output_dim),
        })
    }

    pub fn init(&self, params: &mut ParameterSet, seed: u64) -> Result<(), LmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.input.init(params, &mut rng)?;
        self.blocks.init(params, &mut rng)?;
        self.ln.init(params)?;
        self.output.init(params, &mut rng)?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, top: Var) -> Result<Var, LmError> {
        if g.cols(top) != self.input_dim {
            return Err(LmError::DimMismatch {
                got: g.cols(top),
                expected: self.input_dim,
            });
        }
        let t = g.rows(top);
        if t == 0 {
            return Err(LmError::Empty);
        }
        let x = self.input.forward(g, top)?;
        let pos: Vec<i64> = (0..t as i64).collect();
        let h = self.blocks.forward(g, x, &pos, &AttnMask::Full)?;
        let h = self.ln.forward(g, h)?;
        Ok(self.output.forward(g, h)?)
    }

    /// Length-preserving projection without gradients; empty in, empty out.
    pub fn adapt_acoustic(&self, params: &ParameterSet, top: &Tensor) -> Result<Tensor, LmError> {
        if top.cols() != self.input_dim {
            return Err(LmError::DimMismatch {
                got: top.cols(),
                expected: self.input_dim,
            });
        }
        if top.rows() == 0 {
            return Ok(Tensor::matrix(0, self.output_dim, Vec::new()));
        }
        let mut g = Graph::new(params);
        let x = g.constant(top.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

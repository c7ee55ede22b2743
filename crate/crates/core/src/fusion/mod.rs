//! Acoustic adapter over intermediate encoder states and the MLP turn
//! detector that fuses its pooled vector with the LM hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TurnState;
use crate::nnkit::{AttnMask, Graph, LayerNorm, Linear, NnError, ParameterSet, Tensor, TransformerStack, Var};

pub const ADAPTER_PREFIX: &str = "acoustic_adapter";
pub const DETECTOR_PREFIX: &str = "detector";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("acoustic adapter needs at least one frame")]
    EmptySequence,
    #[error("input dim {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub fusion_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    /// Relative-position clipping; `None` makes the adapter position-free.
    pub rel_max: Option<usize>,
    pub detector_hidden: [usize; 2],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            fusion_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 64,
            rel_max: Some(16),
            detector_hidden: [128, 64],
        }
    }
}

/// Transformer over `mid_hidden` rows followed by mean pooling.
#[derive(Debug, Clone)]
pub struct AcousticAdapter {
    pub input_dim: usize,
    pub fusion_dim: usize,
    input: Linear,
    blocks: TransformerStack,
    ln: LayerNorm,
}

impl AcousticAdapter {
    pub fn new(input_dim: usize, cfg: &FusionConfig) -> Result<Self, FusionError> {
        Ok(Self {
            input_dim,
            fusion_dim: cfg.fusion_dim,
            input: Linear::new(format!("{ADAPTER_PREFIX}.input"), input_dim, cfg.fusion_dim),
            blocks: TransformerStack::new(
                &format!("{ADAPTER_PREFIX}.blocks"),
                cfg.num_layers,
                cfg.fusion_dim,
                cfg.num_heads,
                cfg.ffn_hidden,
                cfg.rel_max,
            )?,
            ln: LayerNorm::new(format!("{ADAPTER_PREFIX}.ln"), cfg.fusion_dim),
        })
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<(), FusionError> {
        self.input.init(params, rng)?;
        self.blocks.init(params, rng)?;
        self.ln.init(params)?;
        Ok(())
    }

    /// `T x input_dim` to a `1 x fusion_dim` pooled vector.
    pub fn forward(&self, g: &mut Graph, mid: Var) -> Result<Var, FusionError> {
        let (t, d) = (g.rows(mid), g.cols(mid));
        if d != self.input_dim {
            return Err(FusionError::DimMismatch {
                got: d,
                expected: self.input_dim,
            });
        }
        if t == 0 {
            return Err(FusionError::EmptySequence);
        }
        let x = self.input.forward(g, mid)?;
        let pos: Vec<i64> = (0..t as i64).collect();
        let h = self.blocks.forward(g, x, &pos, &AttnMask::Full)?;
        let h = self.ln.forward(g, h)?;
        Ok(g.mean_rows(h)?)
    }

    pub fn acoustic_adapt(&self, params: &ParameterSet, mid: &Tensor) -> Result<Vec<f64>, FusionError> {
        let mut g = Graph::new(params);
        let x = g.constant(mid.clone());
        let v = self.forward(&mut g, x)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Three-layer perceptron over `[acoustic ; lm_hidden]` with tanh hidden
/// activations and four logits in [`TurnState::ALL`] order.
#[derive(Debug, Clone)]
pub struct TurnDetector {
    pub input_dim: usize,
    layers: [Linear; 3],
}

impl TurnDetector {
    pub fn new(acoustic_dim: usize, lm_dim: usize, hidden: [usize; 2]) -> Self {
        let input_dim = acoustic_dim + lm_dim;
        Self {
            input_dim,
            layers: [
                Linear::new(format!("{DETECTOR_PREFIX}.l1"), input_dim, hidden[0]),
                Linear::new(format!("{DETECTOR_PREFIX}.l2"), hidden[0], hidden[1]),
                Linear::new(format!("{DETECTOR_PREFIX}.l3"), hidden[1], TurnState::ALL.len()),
            ],
        }
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<(), FusionError> {
        self.layers.iter().try_for_each(|l| l.init(params, rng))?;
        Ok(())
    }

    /// Logits for each row of `fused` (`B x input_dim`).
    pub fn logits(&self, g: &mut Graph, fused: Var) -> Result<Var, FusionError> {
        if g.cols(fused) != self.input_dim {
            return Err(FusionError::DimMismatch {
                got: g.cols(fused),
                expected: self.input_dim,
            });
        }
        let h = self.layers[0].forward(g, fused)?;
        let h = g.tanh(h);
        let h = self.layers[1].forward(g, h)?;
        let h = g.tanh(h);
        Ok(self.layers[2].forward(g, h)?)
    }

    pub fn fuse(&self, g: &mut Graph, acoustic: Var, lm_hidden: Var) -> Result<Var, FusionError> {
        let cat = g.concat_cols(&[acoustic, lm_hidden])?;
        self.logits(g, cat)
    }

    /// Softmax over the four states.
    pub fn detect_turn(
        &self,
        params: &ParameterSet,
        acoustic: &[f64],
        lm_hidden: &[f64],
    ) -> Result<[f64; 4], FusionError> {
        let got = acoustic.len() + lm_hidden.len();
        if got != self.input_dim {
            return Err(FusionError::DimMismatch {
                got,
                expected: self.input_dim,
            });
        }
        let mut g = Graph::new(params);
        let mut row = acoustic.to_vec();
        row.extend_from_slice(lm_hidden);
        let x = g.constant(Tensor::matrix(1, got, row));
        let l = self.logits(&mut g, x)?;
        let p = g.softmax(l)?;
        let p = g.value(p).data();
        Ok([p[0], p[1], p[2], p[3]])
    }
}

/// Builds and initialises both fusion modules.
pub fn init_fusion(
    enc_dim: usize,
    lm_dim: usize,
    cfg: &FusionConfig,
    params: &mut ParameterSet,
    seed: u64,
) -> Result<(AcousticAdapter, TurnDetector), FusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter = AcousticAdapter::new(enc_dim, cfg)?;
    let detector = TurnDetector::new(cfg.fusion_dim, lm_dim, cfg.detector_hidden);
    adapter.init(params, &mut rng)?;
    detector.init(params, &mut rng)?;
    Ok((adapter, detector))
}

pub fn argmax_state(p: &[f64; 4]) -> TurnState {
    let mut best = 0;
    for i in 1..4 {
        if p[i] > p[best] {
            best = i;
        }
    }
    TurnState::from_index(best).expect("four states")
}

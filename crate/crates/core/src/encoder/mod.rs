//! Chunked streaming Conformer-lite encoder.
//!
//! Input frames are reduced by `subsampling_factor` through stride-2 blocks
//! (pointwise projection, non-overlapping depthwise pair, SiLU). Each layer is
//! a macaron stack: half feed-forward, chunked self-attention, causal
//! convolution module, half feed-forward, layer norm. Attention for a query in
//! chunk `c` sees chunks `c - left_context_chunks ..= c`; the convolution sees
//! only the past. The batched path and the streaming path evaluate the same
//! operations on the same rows, so their outputs agree to rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkit::uniform;
use crate::nnkit::{AttnMask, Attention, FeedForward, Graph, LayerNorm, Linear, NnError, ParameterSet, Tensor, Var};

pub const PREFIX: &str = "encoder";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("chunk fed after the final chunk")]
    AfterFinal,
    #[error("chunk of {got} frames, expected {expected}")]
    ChunkLength { got: usize, expected: usize },
    #[error("feature dim {got}, encoder expects {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("{0} input frames produce no encoder output")]
    TooShort(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub conv_kernel: usize,
    pub subsampling_factor: usize,
    /// Input frames per streaming chunk.
    pub chunk_frames: usize,
    pub left_context_chunks: usize,
    /// 1-based layer whose output feeds the acoustic adapter.
    pub mid_layer_index: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            ffn_hidden: 128,
            conv_kernel: 8,
            subsampling_factor: 4,
            chunk_frames: 16,
            left_context_chunks: 4,
            mid_layer_index: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 || self.ffn_hidden == 0 {
            return err("dimensions must be positive".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return err(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.conv_kernel == 0 {
            return err("conv_kernel must be at least 1".into());
        }
        if self.subsampling_factor < 2 || !self.subsampling_factor.is_power_of_two() {
            return err(format!(
                "subsampling_factor {} must be a power of two >= 2",
                self.subsampling_factor
            ));
        }
        if self.chunk_frames == 0 || self.chunk_frames % self.subsampling_factor != 0 {
            return err(format!(
                "chunk_frames {} is not a positive multiple of subsampling_factor {}",
                self.chunk_frames, self.subsampling_factor
            ));
        }
        if self.num_layers == 0 || !(1..=self.num_layers).contains(&self.mid_layer_index) {
            return err(format!(
                "mid_layer_index {} outside 1..={}",
                self.mid_layer_index, self.num_layers
            ));
        }
        Ok(())
    }

    /// Encoder output frames per chunk.
    pub fn chunk_outputs(&self) -> usize {
        self.chunk_frames / self.subsampling_factor
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Largest query-key distance inside an attention window.
    pub fn rel_max(&self) -> usize {
        (self.left_context_chunks + 1) * self.chunk_outputs()
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw: String,
    dw_b: String,
    norm: LayerNorm,
    pw2: Linear,
}

#[derive(Debug, Clone)]
struct ConformerLayer {
    ffn1_ln: LayerNorm,
    ffn1: FeedForward,
    attn_ln: LayerNorm,
    attn: Attention,
    conv: ConvModule,
    ffn2_ln: LayerNorm,
    ffn2: FeedForward,
    final_ln: LayerNorm,
}

/// Per-layer streaming caches.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Projected keys and values of the last `left_context_chunks` chunks.
    pub keys: Tensor,
    pub values: Tensor,
    /// Last `conv_kernel - 1` gated rows entering the depthwise convolution.
    pub conv_tail: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub layers: Vec<LayerCache>,
    pub frames_consumed: usize,
    pub outputs_emitted: usize,
    pub finished: bool,
}

/// Top-layer and tapped intermediate hidden states, `T_out x model_dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub top: Tensor,
    pub mid: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.top.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[EncoderOutput], dim: usize) -> EncoderOutput {
        let cat = |f: fn(&EncoderOutput) -> &Tensor| {
            if parts.is_empty() {
                Tensor::matrix(0, dim, Vec::new())
            } else {
                Tensor::concat_rows(&parts.iter().map(f).collect::<Vec<_>>())
            }
        };
        EncoderOutput {
            top: cat(|o| &o.top),
            mid: cat(|o| &o.mid),
        }
    }
}

/// Graph handles for the two taps.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub top: Var,
    pub mid: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    sub: Vec<(Linear, String)>,
    layers: Vec<ConformerLayer>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let blocks = cfg.subsampling_factor.trailing_zeros() as usize;
        let sub = (0..blocks)
            .map(|i| {
                let input = if i == 0 { cfg.input_dim } else { d };
                (
                    Linear::new(format!("{PREFIX}.sub.{i}.proj"), input, d),
                    format!("{PREFIX}.sub.{i}.dw"),
                )
            })
            .collect();
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("{PREFIX}.layers.{l}");
                Ok(ConformerLayer {
                    ffn1_ln: LayerNorm::new(format!("{p}.ffn1_ln"), d),
                    ffn1: FeedForward::new(format!("{p}.ffn1"), d, cfg.ffn_hidden),
                    attn_ln: LayerNorm::new(format!("{p}.attn_ln"), d),
                    attn: Attention::new(format!("{p}.attn"), d, cfg.num_heads, Some(cfg.rel_max()))?,
                    conv: ConvModule {
                        ln: LayerNorm::new(format!("{p}.conv.ln"), d),
                        pw1: Linear::new(format!("{p}.conv.pw1"), d, 2 * d),
                        dw: format!("{p}.conv.dw"),
                        dw_b: format!("{p}.conv.dw_b"),
                        norm: LayerNorm::new(format!("{p}.conv.norm"), d),
                        pw2: Linear::new(format!("{p}.conv.pw2"), d, d),
                    },
                    ffn2_ln: LayerNorm::new(format!("{p}.ffn2_ln"), d),
                    ffn2: FeedForward::new(format!("{p}.ffn2"), d, cfg.ffn_hidden),
                    final_ln: LayerNorm::new(format!("{p}.final_ln"), d),
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self { cfg, sub, layers })
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<(), EncoderError> {
        let d = self.cfg.model_dim;
        for (proj, dw) in &self.sub {
            proj.init(params, rng)?;
            params.insert(dw.clone(), uniform(rng, &[2, d], 1.0 / 2f64.sqrt()))?;
        }
        let k = self.cfg.conv_kernel;
        for l in &self.layers {
            l.ffn1_ln.init(params)?;
            l.ffn1.init(params, rng)?;
            l.attn_ln.init(params)?;
            l.attn.init(params, rng)?;
            l.conv.ln.init(params)?;
            l.conv.pw1.init(params, rng)?;
            params.insert(l.conv.dw.clone(), uniform(rng, &[k, d], 1.0 / (k as f64).sqrt()))?;
            params.insert(l.conv.dw_b.clone(), Tensor::zeros(&[d]))?;
            l.conv.norm.init(params)?;
            l.conv.pw2.init(params, rng)?;
            l.ffn2_ln.init(params)?;
            l.ffn2.init(params, rng)?;
            l.final_ln.init(params)?;
        }
        Ok(())
    }

    pub fn fresh_state(&self) -> EncoderState {
        let d = self.cfg.model_dim;
        EncoderState {
            layers: (0..self.cfg.num_layers)
                .map(|_| LayerCache {
                    keys: Tensor::matrix(0, d, Vec::new()),
                    values: Tensor::matrix(0, d, Vec::new()),
                    conv_tail: Tensor::zeros(&[self.cfg.conv_kernel - 1, d]),
                })
                .collect(),
            frames_consumed: 0,
            outputs_emitted: 0,
            finished: false,
        }
    }

    fn subsample(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (proj, dw) in &self.sub {
            let p = proj.forward(g, h)?;
            let w = g.param(dw)?;
            let s = g.stride2(p, w)?;
            h = g.silu(s);
        }
        Ok(h)
    }

    fn half_ffn(g: &mut Graph, x: Var, ln: &LayerNorm, ffn: &FeedForward) -> Result<Var, NnError> {
        let h = ln.forward(g, x)?;
        let f = ffn.forward(g, h)?;
        let f = g.scale(f, 0.5);
        g.add(x, f)
    }

    /// Convolution module on `x`, with `history` rows prepended before the
    /// depthwise convolution. Returns the residual output and the gated rows.
    fn conv_module(&self, g: &mut Graph, l: &ConformerLayer, x: Var, history: Var) -> Result<(Var, Var), NnError> {
        let d = self.cfg.model_dim;
        let h = l.conv.ln.forward(g, x)?;
        let h = l.conv.pw1.forward(g, h)?;
        let a = g.slice_cols(h, 0, d)?;
        let b = g.slice_cols(h, d, d)?;
        let gate = g.sigmoid(b);
        let glu = g.mul(a, gate)?;
        let padded = if g.rows(history) == 0 {
            glu
        } else {
            g.concat_rows(&[history, glu])?
        };
        let w = g.param(&l.conv.dw)?;
        let c = g.depthwise_conv(padded, w)?;
        let bias = g.param(&l.conv.dw_b)?;
        let c = g.add_row(c, bias)?;
        let c = l.conv.norm.forward(g, c)?;
        let c = g.silu(c);
        let c = l.conv.pw2.forward(g, c)?;
        Ok((g.add(x, c)?, glu))
    }

    /// Encodes a whole utterance (`T x input_dim`) in one graph, with the
    /// same chunk windows the streaming path uses. Trailing frames that do
    /// not fill a subsampling group are dropped.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<EncoderVars, EncoderError> {
        let (t, f) = (g.rows(x), g.cols(x));
        if f != self.cfg.input_dim {
            return Err(EncoderError::DimMismatch {
                got: f,
                expected: self.cfg.input_dim,
            });
        }
        let factor = self.cfg.subsampling_factor;
        let t_out = t / factor;
        if t_out == 0 {
            return Err(EncoderError::TooShort(t));
        }
        let x = if t_out * factor == t { x } else { g.slice_rows(x, 0, t_out * factor)? };
        let mut h = self.subsample(g, x)?;
        let cs = self.cfg.chunk_outputs();
        let lc = self.cfg.left_context_chunks;
        let d = self.cfg.model_dim;
        let k = self.cfg.conv_kernel;
        let pad = g.constant(Tensor::zeros(&[k - 1, d]));
        let mut mid = None;
        for (li, l) in self.layers.iter().enumerate() {
            h = Self::half_ffn(g, h, &l.ffn1_ln, &l.ffn1)?;
            let a_in = l.attn_ln.forward(g, h)?;
            let q = l.attn.project_q(g, a_in)?;
            let (kk, vv) = l.attn.project_kv(g, a_in)?;
            let mut outs = Vec::new();
            let mut start = 0;
            while start < t_out {
                let len = cs.min(t_out - start);
                let c = start / cs;
                let lo = c.saturating_sub(lc) * cs;
                let qs = g.slice_rows(q, start, len)?;
                let ks = g.slice_rows(kk, lo, start + len - lo)?;
                let vs = g.slice_rows(vv, lo, start + len - lo)?;
                let q_pos: Vec<i64> = (start..start + len).map(|i| i as i64).collect();
                let k_pos: Vec<i64> = (lo..start + len).map(|i| i as i64).collect();
                outs.push(l.attn.attend(g, qs, ks, vs, &q_pos, &k_pos, &AttnMask::Full)?);
                start += len;
            }
            let a = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
            h = g.add(h, a)?;
            h = self.conv_module(g, l, h, pad)?.0;
            h = Self::half_ffn(g, h, &l.ffn2_ln, &l.ffn2)?;
            h = l.final_ln.forward(g, h)?;
            if li + 1 == self.cfg.mid_layer_index {
                mid = Some(h);
            }
        }
        Ok(EncoderVars {
            top: h,
            mid: mid.expect("mid layer index validated"),
        })
    }

    /// Batched encoding of a feature matrix without gradients.
    pub fn encode(&self, params: &ParameterSet, features: &Tensor) -> Result<EncoderOutput, EncoderError> {
        let mut g = Graph::new(params);
        let x = g.constant(features.clone());
        let v = self.forward(&mut g, x)?;
        Ok(EncoderOutput {
            top: g.value(v.top).clone(),
            mid: g.value(v.mid).clone(),
        })
    }

    /// Feeds one chunk to a streaming state. Non-final chunks must hold
    /// exactly `chunk_frames` frames; the final chunk may be shorter, and its
    /// frames beyond the last whole subsampling group are dropped.
    pub fn encode_chunk(
        &self,
        params: &ParameterSet,
        state: &mut EncoderState,
        frames: &Tensor,
        is_final: bool,
    ) -> Result<EncoderOutput, EncoderError> {
        if state.finished {
            return Err(EncoderError::AfterFinal);
        }
        let (rows, f) = (frames.rows(), frames.cols());
        if f != self.cfg.input_dim {
            return Err(EncoderError::DimMismatch {
                got: f,
                expected: self.cfg.input_dim,
            });
        }
        if rows > self.cfg.chunk_frames || (!is_final && rows != self.cfg.chunk_frames) {
            return Err(EncoderError::ChunkLength {
                got: rows,
                expected: self.cfg.chunk_frames,
            });
        }
        let d = self.cfg.model_dim;
        let n_out = rows / self.cfg.subsampling_factor;
        if n_out == 0 {
            state.finished |= is_final;
            state.frames_consumed += rows;
            return Ok(EncoderOutput {
                top: Tensor::matrix(0, d, Vec::new()),
                mid: Tensor::matrix(0, d, Vec::new()),
            });
        }
        let keep = self.cfg.left_context_chunks * self.cfg.chunk_outputs();
        let start = state.outputs_emitted;
        let q_pos: Vec<i64> = (start..start + n_out).map(|i| i as i64).collect();

        let mut g = Graph::new(params);
        let x = g.constant(frames.slice_rows(0, n_out * self.cfg.subsampling_factor));
        let mut h = self.subsample(&mut g, x)?;
        let mut mid = None;
        let mut new_caches = Vec::with_capacity(self.layers.len());
        for (li, (l, cache)) in self.layers.iter().zip(&state.layers).enumerate() {
            h = Self::half_ffn(&mut g, h, &l.ffn1_ln, &l.ffn1)?;
            let a_in = l.attn_ln.forward(&mut g, h)?;
            let q = l.attn.project_q(&mut g, a_in)?;
            let (kn, vn) = l.attn.project_kv(&mut g, a_in)?;
            let (kk, vv) = if cache.keys.rows() == 0 {
                (kn, vn)
            } else {
                let kc = g.constant(cache.keys.clone());
                let vc = g.constant(cache.values.clone());
                (g.concat_rows(&[kc, kn])?, g.concat_rows(&[vc, vn])?)
            };
            let past = cache.keys.rows();
            let k_pos: Vec<i64> = (start - past..start + n_out).map(|i| i as i64).collect();
            let a = l.attn.attend(&mut g, q, kk, vv, &q_pos, &k_pos, &AttnMask::Full)?;
            h = g.add(h, a)?;
            let hist = g.constant(cache.conv_tail.clone());
            let (out, glu) = self.conv_module(&mut g, l, h, hist)?;
            h = Self::half_ffn(&mut g, out, &l.ffn2_ln, &l.ffn2)?;
            h = l.final_ln.forward(&mut g, h)?;
            if li + 1 == self.cfg.mid_layer_index {
                mid = Some(h);
            }

            let tail = |t: &Tensor, n: usize| t.slice_rows(t.rows() - n.min(t.rows()), n.min(t.rows()));
            let all_k = g.value(kk);
            let all_v = g.value(vv);
            let conv_all = Tensor::concat_rows(&[&cache.conv_tail, g.value(glu)]);
            new_caches.push(LayerCache {
                keys: tail(all_k, keep),
                values: tail(all_v, keep),
                conv_tail: tail(&conv_all, self.cfg.conv_kernel - 1),
            });
        }
        let out = EncoderOutput {
            top: g.value(h).clone(),
            mid: g.value(mid.expect("mid layer index validated")).clone(),
        };
        state.layers = new_caches;
        state.frames_consumed += rows;
        state.outputs_emitted += n_out;
        state.finished |= is_final;
        Ok(out)
    }

    /// Runs a whole utterance through the streaming path chunk by chunk.
    pub fn encode_streaming(&self, params: &ParameterSet, features: &Tensor) -> Result<EncoderOutput, EncoderError> {
        let mut state = self.fresh_state();
        let cf = self.cfg.chunk_frames;
        let t = features.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        loop {
            let len = cf.min(t - start);
            let is_final = start + len == t;
            parts.push(self.encode_chunk(params, &mut state, &features.slice_rows(start, len), is_final)?);
            start += len;
            if is_final {
                break;
            }
        }
        Ok(EncoderOutput::concat(&parts, self.cfg.model_dim))
    }
}

/// Builds an encoder and initialises its parameters from `seed`.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<(Encoder, ParameterSet, EncoderState), EncoderError> {
    let enc = Encoder::new(cfg.clone())?;
    let mut params = ParameterSet::new();
    enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let state = enc.fresh_state();
    Ok((enc, params, state))
}

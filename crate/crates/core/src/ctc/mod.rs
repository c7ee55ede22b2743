//! CTC objective, streaming greedy decoding and prompt formatting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::langmodel::{LmError, LmVocab, CTC_CLOSE, CTC_OPEN};
use crate::nnkit::{Graph, Linear, NnError, ParameterSet, Tensor, Var};

pub const BLANK_ID: usize = 0;
pub const PREFIX: &str = "ctc";

#[derive(Debug, Error)]
pub enum CtcError {
    /// The target cannot be aligned to the given number of frames; the loss
    /// is `+inf`.
    #[error("target needs at least {required} frames, got {frames}")]
    Infeasible { frames: usize, required: usize },
    #[error("target contains the blank id")]
    BlankInTarget,
    #[error("label {label} outside alphabet of {classes}")]
    LabelRange { label: usize, classes: usize },
    #[error("frame has {got} classes, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CtcError {
    /// Loss value reported for this condition.
    pub fn loss(&self) -> f64 {
        f64::INFINITY
    }
}

/// Linear projection from encoder states to per-frame log-probabilities over
/// `classes` outputs, blank first.
#[derive(Debug, Clone)]
pub struct CtcHead {
    pub proj: Linear,
    pub classes: usize,
}

impl CtcHead {
    pub fn new(model_dim: usize, classes: usize) -> Self {
        Self {
            proj: Linear::new(format!("{PREFIX}.proj"), model_dim, classes),
            classes,
        }
    }

    pub fn init(&self, params: &mut ParameterSet, seed: u64) -> Result<(), NnError> {
        self.proj.init(params, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn forward(&self, g: &mut Graph, top: Var) -> Result<Var, NnError> {
        let logits = self.proj.forward(g, top)?;
        g.log_softmax(logits)
    }

    pub fn log_probs(&self, params: &ParameterSet, top: &Tensor) -> Result<Tensor, NnError> {
        if top.rows() == 0 {
            return Ok(Tensor::matrix(0, self.classes, Vec::new()));
        }
        let mut g = Graph::new(params);
        let x = g.constant(top.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Loss value and its gradient with respect to the log-probabilities.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Tensor,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frames needed: one per label plus a blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `log_probs` (`T x C`, blank at
/// column 0), summed over all alignments by log-space forward-backward.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcLoss, CtcError> {
    let (t_len, c) = (log_probs.rows(), log_probs.cols());
    for &l in target {
        if l == BLANK_ID {
            return Err(CtcError::BlankInTarget);
        }
        if l >= c {
            return Err(CtcError::LabelRange { label: l, classes: c });
        }
    }
    let required = min_frames(target);
    if t_len < required {
        return Err(CtcError::Infeasible {
            frames: t_len,
            required,
        });
    }
    if t_len == 0 {
        return Ok(CtcLoss {
            loss: 0.0,
            grad: Tensor::matrix(0, c, Vec::new()),
        });
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * c + k];
    let ext: Vec<usize> = std::iter::once(BLANK_ID)
        .chain(target.iter().flat_map(|&l| [l, BLANK_ID]))
        .collect();
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2];

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = lse2(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = lse2(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == neg { neg } else { b + lp(t, ext[s]) };
        }
    }

    // d(-log p) / d lp[t, k] = -(posterior occupancy of class k at frame t).
    let mut occ = vec![neg; t_len * c];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > neg {
                let o = &mut occ[t * c + ext[s]];
                *o = lse2(*o, ab - lp(t, ext[s]));
            }
        }
    }
    let grad = occ
        .iter()
        .map(|&o| if o == neg { 0.0 } else { -(o - log_p).exp() })
        .collect();
    Ok(CtcLoss {
        loss: -log_p,
        grad: Tensor::matrix(t_len, c, grad),
    })
}

/// CTC loss as a differentiable graph node over `log_probs`.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var, CtcError> {
    let r = ctc_loss(g.value(log_probs), target)?;
    Ok(g.external_scalar(log_probs, r.loss, r.grad)?)
}

/// Merges adjacent duplicates, then deletes blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-by-frame greedy decoder state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GreedyState {
    pub last: Option<usize>,
    pub transcript: Vec<usize>,
    pub frames_seen: usize,
}

impl GreedyState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Consumes one frame of log-probabilities; returns the newly emitted
    /// tokens (zero or one).
    pub fn step(&mut self, frame: &[f64], classes: usize) -> Result<Vec<usize>, CtcError> {
        if frame.len() != classes {
            return Err(CtcError::DimMismatch {
                got: frame.len(),
                expected: classes,
            });
        }
        let k = argmax(frame);
        self.frames_seen += 1;
        let emit = k != BLANK_ID && Some(k) != self.last;
        self.last = Some(k);
        if emit {
            self.transcript.push(k);
            Ok(vec![k])
        } else {
            Ok(Vec::new())
        }
    }

    /// Feeds every row of a `T x C` matrix.
    pub fn step_all(&mut self, log_probs: &Tensor) -> Result<Vec<usize>, CtcError> {
        let mut out = Vec::new();
        for t in 0..log_probs.rows() {
            out.extend(self.step(log_probs.row(t), log_probs.cols())?);
        }
        Ok(out)
    }
}

pub fn greedy_step(state: &mut GreedyState, frame: &[f64], classes: usize) -> Result<Vec<usize>, CtcError> {
    state.step(frame, classes)
}

/// Offline greedy decode: per-frame argmax, then collapse.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    collapse_path(&path, BLANK_ID)
}

/// `[<ctc>, mapped tokens.., </ctc>]`.
pub fn format_ctc_prompt(transcript: &[usize], vocab: &LmVocab) -> Result<Vec<usize>, CtcError> {
    let mut out = Vec::with_capacity(transcript.len() + 2);
    out.push(CTC_OPEN);
    for &t in transcript {
        out.push(vocab.from_asr(t)?);
    }
    out.push(CTC_CLOSE);
    Ok(out)
}

/// Inverse of [`format_ctc_prompt`].
pub fn parse_ctc_prompt(prompt: &[usize], vocab: &LmVocab) -> Result<Vec<usize>, CtcError> {
    match prompt {
        [CTC_OPEN, body @ .., CTC_CLOSE] => body
            .iter()
            .map(|&id| {
                vocab
                    .to_asr(id)
                    .ok_or_else(|| CtcError::Prompt(format!("id {id} is not a transcript token")))
            })
            .collect(),
        _ => Err(CtcError::Prompt("missing <ctc> markers".into())),
    }
}

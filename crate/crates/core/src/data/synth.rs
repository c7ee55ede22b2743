//! Synthetic turn-state corpora.
//!
//! Token ids: 0 is the CTC blank, 1 the end-of-turn marker, 2 the wait phrase,
//! then `backchannel_vocab` backchannel tokens, then general content. Each
//! token is rendered as a run of frames around a fixed mean vector; silence
//! frames are centred on zero.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rng::{derive_seed, stream_rng, Rng};
use super::{DataError, FeatureMatrix, Sample, Source, TurnState};

pub const BLANK: usize = 0;
pub const EOT_TOKEN: usize = 1;
pub const WAIT_TOKEN: usize = 2;
pub const FIRST_BACKCHANNEL: usize = 3;

/// Where each token class lives in the id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub vocab_size: usize,
    pub backchannel_vocab: usize,
}

impl TokenLayout {
    pub fn new(vocab_size: usize, backchannel_vocab: usize) -> Result<Self, DataError> {
        if vocab_size < 4 {
            return Err(DataError::Config(format!("vocab_size {vocab_size} < 4")));
        }
        if backchannel_vocab == 0 {
            return Err(DataError::Config("backchannel sub-vocabulary is empty".into()));
        }
        if FIRST_BACKCHANNEL + backchannel_vocab >= vocab_size {
            return Err(DataError::Config(format!(
                "backchannel sub-vocabulary of {backchannel_vocab} leaves no content tokens in a vocabulary of {vocab_size}"
            )));
        }
        Ok(Self {
            vocab_size,
            backchannel_vocab,
        })
    }

    pub fn backchannel(&self) -> std::ops::Range<usize> {
        FIRST_BACKCHANNEL..FIRST_BACKCHANNEL + self.backchannel_vocab
    }

    pub fn content(&self) -> std::ops::Range<usize> {
        FIRST_BACKCHANNEL + self.backchannel_vocab..self.vocab_size
    }
}

/// Inclusive integer range `[lo, hi]`.
pub type IntRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Output alphabet size including the blank.
    pub vocab_size: usize,
    pub samples_per_state: BTreeMap<TurnState, usize>,
    pub frames_per_token: IntRange,
    pub noise_std: f64,
    pub overlap_prob: f64,
    /// Amplitude of the overlapping speaker relative to the primary one.
    pub overlap_gain: f64,
    pub seed: u64,
    /// Seeds the token mean vectors; corpora sharing it share a lexicon.
    pub lexicon_seed: u64,
    pub feature_dim: usize,
    pub backchannel_vocab: usize,
    /// Content tokens before the end-of-turn or wait marker.
    pub content_tokens: IntRange,
    pub leading_silence: IntRange,
    pub trailing_silence: IntRange,
    pub frame_period_ms: f32,
    pub mean_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            samples_per_state: TurnState::ALL.into_iter().map(|s| (s, 100)).collect(),
            frames_per_token: (6, 10),
            noise_std: 0.0,
            overlap_prob: 0.0,
            overlap_gain: 0.7,
            seed: 0,
            lexicon_seed: 0x5EED,
            feature_dim: 16,
            backchannel_vocab: 3,
            content_tokens: (2, 6),
            leading_silence: (0, 4),
            trailing_silence: (16, 32),
            frame_period_ms: super::DEFAULT_FRAME_PERIOD_MS,
            mean_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn with_counts(mut self, per_state: usize) -> Self {
        self.samples_per_state = TurnState::ALL.into_iter().map(|s| (s, per_state)).collect();
        self
    }

    pub fn layout(&self) -> Result<TokenLayout, DataError> {
        TokenLayout::new(self.vocab_size, self.backchannel_vocab)
    }

    pub fn validate(&self) -> Result<TokenLayout, DataError> {
        let layout = self.layout()?;
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(DataError::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("overlap_prob", self.overlap_prob)?;
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(DataError::Config(format!("{name} = {v} must be finite and non-negative")))
            }
        };
        nonneg("noise_std", self.noise_std)?;
        nonneg("overlap_gain", self.overlap_gain)?;
        nonneg("mean_scale", self.mean_scale)?;
        for (name, (lo, hi)) in [
            ("frames_per_token", self.frames_per_token),
            ("content_tokens", self.content_tokens),
            ("leading_silence", self.leading_silence),
            ("trailing_silence", self.trailing_silence),
        ] {
            if lo > hi {
                return Err(DataError::Config(format!("{name} range [{lo}, {hi}] is reversed")));
            }
        }
        if self.frames_per_token.0 == 0 {
            return Err(DataError::Config("frames_per_token must be at least 1".into()));
        }
        if self.content_tokens.0 == 0 {
            return Err(DataError::Config("content_tokens must be at least 1".into()));
        }
        if self.content_tokens.1 > layout.content().len() {
            return Err(DataError::Config(format!(
                "content_tokens upper bound {} exceeds the {} distinct content tokens",
                self.content_tokens.1,
                layout.content().len()
            )));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Config("feature_dim must be positive".into()));
        }
        if !(self.frame_period_ms.is_finite() && self.frame_period_ms > 0.0) {
            return Err(DataError::Config("frame_period_ms must be positive".into()));
        }
        Ok(layout)
    }
}

/// Mean feature vector of every token id; row 0 doubles as the silence mean.
pub fn token_means(vocab_size: usize, dim: usize, lexicon_seed: u64, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(derive_seed(lexicon_seed, "lexicon"), 0);
    let mut means = vec![vec![0.0; dim]];
    for _ in 1..vocab_size {
        means.push(
            (0..dim)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>(),
        );
    }
    means
}

fn draw(rng: &mut Rng, (lo, hi): IntRange) -> usize {
    rng.random_range(lo..=hi)
}

/// Draws from `pool` avoiding `prev`, so no token repeats back to back.
fn draw_token(rng: &mut Rng, pool: std::ops::Range<usize>, prev: Option<usize>) -> usize {
    let candidates: Vec<usize> = pool.filter(|t| Some(*t) != prev).collect();
    candidates[rng.random_range(0..candidates.len())]
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    means: &'a [Vec<f64>],
}

impl Renderer<'_> {
    fn push_frames(&self, rng: &mut Rng, out: &mut Vec<f64>, mean: &[f64], n: usize) {
        for _ in 0..n {
            for m in mean {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + self.cfg.noise_std * z);
            }
        }
    }

    fn silence(&self, rng: &mut Rng, out: &mut Vec<f64>, n: usize) {
        self.push_frames(rng, out, &self.means[BLANK], n);
    }

    /// Leading silence then the tokens; returns the spans.
    fn utterance(&self, rng: &mut Rng, out: &mut Vec<f64>, tokens: &[usize]) -> Vec<(usize, usize)> {
        let dim = self.cfg.feature_dim;
        let lead = draw(rng, self.cfg.leading_silence);
        self.silence(rng, out, lead);
        let mut spans = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let start = out.len() / dim;
            let n = draw(rng, self.cfg.frames_per_token);
            self.push_frames(rng, out, &self.means[t], n);
            spans.push((start, start + n));
        }
        spans
    }

    /// Adds a second speaker over a random span of the stream.
    fn overlap(&self, rng: &mut Rng, layout: &TokenLayout, values: &mut [f64]) {
        let dim = self.cfg.feature_dim;
        let frames = values.len() / dim;
        if frames == 0 || !rng.random_bool(self.cfg.overlap_prob) {
            return;
        }
        let n_tokens = draw(rng, self.cfg.content_tokens);
        let mut prev = None;
        let mut stream = Vec::new();
        for _ in 0..n_tokens {
            let t = draw_token(rng, layout.content(), prev);
            prev = Some(t);
            let n = draw(rng, self.cfg.frames_per_token);
            for _ in 0..n {
                stream.extend_from_slice(&self.means[t]);
            }
        }
        let len = (stream.len() / dim).min(frames);
        let start = rng.random_range(0..=frames - len);
        for (v, s) in values[start * dim..(start + len) * dim].iter_mut().zip(&stream) {
            *v += self.cfg.overlap_gain * s;
        }
    }
}

fn finish(cfg: &SynthConfig, values: Vec<f64>) -> Arc<FeatureMatrix> {
    let values = values.into_iter().map(|v| v as f32).collect();
    Arc::new(FeatureMatrix::new(cfg.feature_dim, cfg.frame_period_ms, values).expect("finite synthetic features"))
}

/// Distinct content tokens in random order.
fn content(rng: &mut Rng, cfg: &SynthConfig, layout: &TokenLayout) -> Vec<usize> {
    let n = draw(rng, cfg.content_tokens);
    let mut pool: Vec<usize> = layout.content().collect();
    let (chosen, _) = pool.partial_shuffle(rng, n);
    chosen.to_vec()
}

fn synth_one(
    cfg: &SynthConfig,
    layout: &TokenLayout,
    means: &[Vec<f64>],
    state: TurnState,
    index: usize,
) -> Result<Sample, DataError> {
    let r = Renderer { cfg, means };
    let mut rng = stream_rng(
        derive_seed(cfg.seed, "synth"),
        ((state.index() as u64) << 32) | index as u64,
    );
    let tokens = match state {
        TurnState::Complete | TurnState::Incomplete => {
            let mut t = content(&mut rng, cfg, layout);
            t.push(EOT_TOKEN);
            t
        }
        TurnState::Wait => {
            let mut t = content(&mut rng, cfg, layout);
            t.push(WAIT_TOKEN);
            t
        }
        TurnState::Backchannel => {
            let n = rng.random_range(1..=3);
            let mut prev = None;
            (0..n)
                .map(|_| {
                    let t = draw_token(&mut rng, layout.backchannel(), prev);
                    prev = Some(t);
                    t
                })
                .collect()
        }
    };
    let mut values = Vec::new();
    let alignments = r.utterance(&mut rng, &mut values, &tokens);
    let mut sample = Sample {
        id: format!("{state}-{index:05}"),
        turn_state: state,
        tokens,
        alignments,
        features: finish(cfg, values),
        source: Source::Synthesized,
    };
    if state == TurnState::Incomplete {
        sample.turn_state = TurnState::Complete;
        sample = make_incomplete_with(&sample, &mut rng, EOT_TOKEN)?;
        sample.id = format!("{state}-{index:05}");
    }
    let mut values: Vec<f64> = sample.features.values().iter().map(|v| *v as f64).collect();
    let trail = draw(&mut rng, cfg.trailing_silence);
    r.silence(&mut rng, &mut values, trail);
    r.overlap(&mut rng, layout, &mut values);
    sample.features = finish(cfg, values);
    Ok(sample)
}

/// Generates `samples_per_state[s]` samples of each state, in state order.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Sample>, DataError> {
    let layout = cfg.validate()?;
    let means = token_means(cfg.vocab_size, cfg.feature_dim, cfg.lexicon_seed, cfg.mean_scale);
    let mut out = Vec::new();
    for state in TurnState::ALL {
        let n = cfg.samples_per_state.get(&state).copied().unwrap_or(0);
        for i in 0..n {
            out.push(synth_one(cfg, &layout, &means, state, i)?);
        }
    }
    Ok(out)
}

/// Keeps the first `keep` tokens, cutting features at the end of the last
/// kept token's span.
pub fn truncate_at(sample: &Sample, keep: usize) -> Result<Sample, DataError> {
    if keep == 0 || keep > sample.tokens.len() {
        return Err(DataError::Truncation(format!(
            "cannot keep {keep} of {} tokens",
            sample.tokens.len()
        )));
    }
    let cut = sample.alignments[keep - 1].1;
    Ok(Sample {
        id: sample.id.clone(),
        turn_state: sample.turn_state,
        tokens: sample.tokens[..keep].to_vec(),
        alignments: sample.alignments[..keep].to_vec(),
        features: Arc::new(sample.features.slice(0, cut)),
        source: sample.source,
    })
}

/// Truncates a Complete sample at a random token boundary before its final
/// token, skipping cuts that would still end on the end-of-turn token.
pub fn make_incomplete(sample: &Sample, rng: &mut Rng) -> Result<Sample, DataError> {
    make_incomplete_with(sample, rng, EOT_TOKEN)
}

pub fn make_incomplete_with(sample: &Sample, rng: &mut Rng, eot: usize) -> Result<Sample, DataError> {
    if sample.turn_state != TurnState::Complete {
        return Err(DataError::Truncation(format!(
            "{} is {}, not complete",
            sample.id, sample.turn_state
        )));
    }
    if sample.tokens.len() < 2 {
        return Err(DataError::Truncation(format!(
            "{} has {} token(s), no cut point before the last",
            sample.id,
            sample.tokens.len()
        )));
    }
    let cuts: Vec<usize> = (1..sample.tokens.len())
        .filter(|&k| sample.tokens[k - 1] != eot)
        .collect();
    if cuts.is_empty() {
        return Err(DataError::Truncation(format!(
            "{}: every cut point ends on the end-of-turn token",
            sample.id
        )));
    }
    let keep = cuts[rng.random_range(0..cuts.len())];
    let mut out = truncate_at(sample, keep)?;
    out.turn_state = TurnState::Incomplete;
    Ok(out)
}

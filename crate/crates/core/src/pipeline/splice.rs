use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::rng::Rng;
use crate::data::Sample;
use crate::nnkit::Tensor;

/// Builds new utterances by concatenating token segments cut from a corpus
/// at their alignment spans, with leading and trailing silence borrowed
/// from random samples.
pub struct Splicer<'a> {
    samples: &'a [Sample],
    /// Token id to `(sample, token position)` occurrences.
    occurrences: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl<'a> Splicer<'a> {
    pub fn new(samples: &'a [Sample]) -> Self {
        let mut occurrences: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (si, s) in samples.iter().enumerate() {
            for (ti, &t) in s.tokens.iter().enumerate() {
                occurrences.entry(t).or_default().push((si, ti));
            }
        }
        Self { samples, occurrences }
    }

    pub fn is_empty(&self) -> bool {
        self.occurrences.is_empty()
    }

    /// A spliced utterance of 1 to `max_tokens` distinct tokens and its
    /// feature rows.
    pub fn draw(&self, rng: &mut Rng, max_tokens: usize) -> Option<(Tensor, Vec<usize>)> {
        let mut pool: Vec<usize> = self.occurrences.keys().copied().collect();
        if pool.is_empty() || max_tokens == 0 {
            return None;
        }
        let n = rng.random_range(1..=max_tokens.min(pool.len()));
        let (tokens, _) = pool.partial_shuffle(rng, n);
        let tokens = tokens.to_vec();
        let dim = self.samples[0].features.dim();
        let mut values: Vec<f64> = Vec::new();
        let mut push = |s: &Sample, start: usize, end: usize| {
            for f in start..end {
                values.extend(s.features.frame(f).iter().map(|&v| v as f64));
            }
        };
        let lead = &self.samples[rng.random_range(0..self.samples.len())];
        if let Some(&(s, _)) = lead.alignments.first() {
            push(lead, 0, s);
        }
        for t in &tokens {
            let occ = &self.occurrences[t];
            let (si, ti) = occ[rng.random_range(0..occ.len())];
            let s = &self.samples[si];
            let (a, b) = s.alignments[ti];
            push(s, a, b);
        }
        let tail = &self.samples[rng.random_range(0..self.samples.len())];
        if let Some(&(_, e)) = tail.alignments.last() {
            push(tail, e, tail.features.num_frames());
        }
        let frames = values.len() / dim;
        Some((Tensor::matrix(frames, dim, values), tokens))
    }
}

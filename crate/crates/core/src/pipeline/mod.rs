//! Four-stage training: acoustic and text pretraining, modality alignment,
//! joint training with prompt dropout, and fusion.

mod schedule;
mod splice;

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{ctc_loss_var, format_ctc_prompt, greedy_decode, CtcError};
use crate::data::rng::{derive_seed, stream_rng, Rng};
use crate::data::{Sample, TurnState};
use crate::langmodel::{turn_input, LmVocab, CTC_CLOSE, CTC_OPEN, EOS, SIL, BOS};
use crate::model::{Model, ModelError};
use crate::nnkit::{Adam, Gradients, Graph, NnError, ParameterSet, SchedulePoint, Tensor, Var};

pub use splice::Splicer;
pub use schedule::{Objective, StageId, StageSchedule, TrainConfig, MAX_PROMPT_DROPOUT};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {stage} step {step}: loss is {loss} ({detail})")]
    NonFiniteLoss {
        stage: StageId,
        step: u64,
        loss: f64,
        detail: String,
    },
    #[error("stage {0}: no usable training samples")]
    EmptyCorpus(StageId),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        PipelineError::Model(e.into())
    }
}

impl From<CtcError> for PipelineError {
    fn from(e: CtcError) -> Self {
        PipelineError::Model(e.into())
    }
}

impl From<crate::langmodel::LmError> for PipelineError {
    fn from(e: crate::langmodel::LmError) -> Self {
        PipelineError::Model(e.into())
    }
}

impl From<crate::fusion::FusionError> for PipelineError {
    fn from(e: crate::fusion::FusionError) -> Self {
        PipelineError::Model(e.into())
    }
}

impl From<crate::encoder::EncoderError> for PipelineError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        PipelineError::Model(e.into())
    }
}

/// Replaces the prompt by its empty form `[<ctc>, </ctc>]` with probability `p`.
pub fn apply_prompt_dropout(prompt: &[usize], p: f64, rng: &mut Rng) -> Result<Vec<usize>, PipelineError> {
    schedule::check_dropout(p)?;
    if p > 0.0 && rng.random::<f64>() < p {
        Ok(vec![CTC_OPEN, CTC_CLOSE])
    } else {
        Ok(prompt.to_vec())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: StageId,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: StageId,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Samples skipped because their target could not be aligned.
    pub skipped: usize,
}

impl StageReport {
    /// Mean loss over consecutive windows of `window` steps.
    pub fn windowed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Per-sample inputs derived from the frozen acoustic front end.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub top: Tensor,
    pub mid: Tensor,
    /// Greedy CTC hypothesis.
    pub transcript: Vec<usize>,
}

/// Reshuffles the sample order every epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Runs the training stages over one parameter set.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub cfg: TrainConfig,
    pub params: ParameterSet,
    pub log: Vec<LogRecord>,
    sink: Option<Box<dyn Write + 'm>>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, cfg: TrainConfig, params: ParameterSet) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            params,
            log: Vec::new(),
            sink: None,
        })
    }

    /// Also writes each log record as a JSON line to `w`.
    pub fn with_log_sink(mut self, w: impl Write + 'm) -> Self {
        self.sink = Some(Box::new(w));
        self
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    /// Runs every configured stage in order.
    pub fn run_all(&mut self, train: &[Sample]) -> Result<Vec<StageReport>, PipelineError> {
        let stages: Vec<StageId> = self.cfg.stages.iter().map(|s| s.stage).collect();
        stages.into_iter().map(|s| self.run_stage(s, train)).collect()
    }

    pub fn run_stage1(&mut self, train: &[Sample]) -> Result<[StageReport; 2], PipelineError> {
        Ok([self.run_stage(StageId::S1a, train)?, self.run_stage(StageId::S1b, train)?])
    }

    pub fn run_stage2(&mut self, train: &[Sample]) -> Result<StageReport, PipelineError> {
        self.run_stage(StageId::S2, train)
    }

    pub fn run_stage3(&mut self, train: &[Sample]) -> Result<StageReport, PipelineError> {
        self.run_stage(StageId::S3, train)
    }

    pub fn run_stage4(&mut self, train: &[Sample]) -> Result<StageReport, PipelineError> {
        self.run_stage(StageId::S4, train)
    }

    /// Applies the stage's freeze mask and trains for its step budget.
    pub fn run_stage(&mut self, stage: StageId, train: &[Sample]) -> Result<StageReport, PipelineError> {
        let sched = self.cfg.schedule(stage)?.clone();
        apply_freeze_mask(&mut self.params, stage);
        let report = match stage {
            StageId::S1a => {
                let inputs: Vec<Tensor> = train.iter().map(|s| s.features.to_tensor()).collect();
                self.train_loop(&sched, train.len(), |me, g, i, _| me.ctc_example(g, &inputs[i], &train[i].tokens))?
            }
            StageId::S1b => {
                let model = self.model;
                let vocab = &model.vocab;
                let copy_fraction = self.cfg.copy_task_fraction;
                let mut task_rng = stream_rng(derive_seed(self.cfg.seed, "copy-task"), 0);
                let report = self.train_loop(&sched, train.len(), |me, g, i, _| {
                    if task_rng.random::<f64>() < copy_fraction {
                        let (cue, text) = copy_example(vocab, &mut task_rng);
                        me.transcription_example(g, None, &cue, &text).map(Some)
                    } else {
                        let prompt = format_ctc_prompt(&train[i].tokens, vocab)?;
                        me.turn_example(g, None, &prompt, train[i].turn_state).map(Some)
                    }
                })?;
                self.model.snapshot_text_lm(&mut self.params);
                report
            }
            StageId::S2 => {
                let prep = self.prepare(train)?;
                let splicer = Splicer::new(train);
                let splice_fraction = self.cfg.splice_fraction;
                let mut splice_rng = stream_rng(derive_seed(self.cfg.seed, "splice"), 0);
                self.train_loop(&sched, train.len(), |me, g, i, _| {
                    let (top, tokens) = if splice_rng.random::<f64>() < splice_fraction {
                        match splicer.draw(&mut splice_rng, COPY_MAX_TOKENS) {
                            Some((x, tokens)) if x.rows() >= me.model.cfg.encoder.subsampling_factor => {
                                (me.model.encoder.encode(&me.params, &x)?.top, tokens)
                            }
                            _ => (prep[i].top.clone(), train[i].tokens.clone()),
                        }
                    } else {
                        (prep[i].top.clone(), train[i].tokens.clone())
                    };
                    let text = me.model.vocab.map_asr(&tokens)?;
                    let prefix = me.adapted(g, &top)?;
                    me.transcription_example(g, Some(prefix), &[], &text).map(Some)
                })?
            }
            StageId::S3 => {
                let prep = self.prepare(train)?;
                let p = self.cfg.prompt_dropout_p;
                let mut drop_rng = stream_rng(derive_seed(self.cfg.seed, "prompt-dropout"), 0);
                self.train_loop(&sched, train.len(), |me, g, i, _| {
                    let prompt = format_ctc_prompt(&prep[i].transcript, &me.model.vocab)?;
                    let prompt = apply_prompt_dropout(&prompt, p, &mut drop_rng)?;
                    let prefix = me.adapted(g, &prep[i].top)?;
                    me.turn_example(g, Some(prefix), &prompt, train[i].turn_state).map(Some)
                })?
            }
            StageId::S4 => {
                let prep = self.prepare(train)?;
                let hidden: Vec<Vec<f64>> = prep
                    .iter()
                    .map(|p| Ok(self.model.semantic(&self.params, &p.top, &p.transcript)?.hidden))
                    .collect::<Result<_, PipelineError>>()?;
                self.train_loop(&sched, train.len(), |me, g, i, _| {
                    me.fusion_example(g, &prep[i].mid, &hidden[i], train[i].turn_state).map(Some)
                })?
            }
        };
        Ok(report)
    }

    /// Batched encoder outputs and greedy transcripts under the current
    /// parameters.
    pub fn prepare(&self, samples: &[Sample]) -> Result<Vec<Prepared>, PipelineError> {
        samples
            .iter()
            .map(|s| {
                let enc = self.model.encoder.encode(&self.params, &s.features.to_tensor())?;
                let lp = self.model.ctc.log_probs(&self.params, &enc.top)?;
                Ok(Prepared {
                    transcript: greedy_decode(&lp),
                    top: enc.top,
                    mid: enc.mid,
                })
            })
            .collect()
    }

    fn adapted(&self, g: &mut Graph, top: &Tensor) -> Result<Var, PipelineError> {
        let x = g.constant(top.clone());
        Ok(self.model.llm_adapter.forward(g, x)?)
    }

    /// CTC loss of one utterance; `None` when the target cannot be aligned.
    fn ctc_example(&self, g: &mut Graph, x: &Tensor, target: &[usize]) -> Result<Option<Var>, PipelineError> {
        let x = g.constant(x.clone());
        let enc = self.model.encoder.forward(g, x)?;
        let lp = self.model.ctc.forward(g, enc.top)?;
        match ctc_loss_var(g, lp, target) {
            Ok(l) => Ok(Some(l)),
            Err(CtcError::Infeasible { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Next-token loss of `[prefix ; cue ; <bos> ; text]` against
    /// `text ; <eos>`, with the cue unsupervised.
    fn transcription_example(
        &self,
        g: &mut Graph,
        prefix: Option<Var>,
        cue: &[usize],
        text: &[usize],
    ) -> Result<Var, PipelineError> {
        let p_len = prefix.map(|p| g.rows(p)).unwrap_or(0);
        let mut tokens = cue.to_vec();
        tokens.push(BOS);
        tokens.extend_from_slice(text);
        let mut targets = vec![None; p_len + cue.len()];
        targets.extend(text.iter().map(|&t| Some(t)));
        targets.push(Some(EOS));
        let v = self.model.lm.forward(g, &tokens, prefix)?;
        Ok(g.cross_entropy(v.logits, &targets)?)
    }

    /// Cross-entropy of the turn token after `[prefix ; <bos> ; prompt]`.
    fn turn_example(
        &self,
        g: &mut Graph,
        prefix: Option<Var>,
        prompt: &[usize],
        state: TurnState,
    ) -> Result<Var, PipelineError> {
        let tokens = turn_input(prompt);
        let h = self.model.lm.hidden(g, &tokens, prefix)?;
        let last = g.slice_rows(h, g.rows(h) - 1, 1)?;
        let logits = self.model.lm.head(g, last)?;
        Ok(g.cross_entropy(logits, &[Some(LmVocab::turn_token(state))])?)
    }

    fn fusion_example(&self, g: &mut Graph, mid: &Tensor, hidden: &[f64], state: TurnState) -> Result<Var, PipelineError> {
        let x = g.constant(mid.clone());
        let a = self.model.acoustic.forward(g, x)?;
        let h = g.constant(Tensor::matrix(1, hidden.len(), hidden.to_vec()));
        let logits = self.model.detector.fuse(g, a, h)?;
        Ok(g.cross_entropy(logits, &[Some(state.index())])?)
    }

    fn train_loop<F>(&mut self, sched: &StageSchedule, n: usize, mut example: F) -> Result<StageReport, PipelineError>
    where
        F: FnMut(&Self, &mut Graph, usize, u64) -> Result<Option<Var>, PipelineError>,
    {
        if n == 0 {
            return Err(PipelineError::EmptyCorpus(sched.stage));
        }
        let mut sampler = EpochSampler::new(n, stream_rng(derive_seed(self.cfg.seed, sched.stage.as_str()), 0));
        let mut adam = Adam::new();
        let mut report = StageReport {
            stage: sched.stage,
            losses: Vec::with_capacity(sched.total_steps as usize),
            skipped: 0,
        };
        for step in 1..=sched.total_steps {
            let mut grads = Gradients::new();
            let mut total = 0.0;
            let mut used = 0usize;
            for _ in 0..self.cfg.batch_size {
                let i = sampler.next();
                let mut g = Graph::new(&self.params);
                let Some(loss) = example(self, &mut g, i, step)? else {
                    report.skipped += 1;
                    continue;
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss {
                        stage: sched.stage,
                        step,
                        loss: value,
                        detail: format!("sample index {i}"),
                    });
                }
                total += value;
                used += 1;
                grads.accumulate(g.backward(loss)?);
            }
            if used == 0 {
                report.losses.push(f64::NAN);
                continue;
            }
            grads.scale(1.0 / used as f64);
            if self.cfg.grad_clip > 0.0 {
                grads.clip_global_norm(self.cfg.grad_clip);
            }
            let lr = sched.lr_at(step);
            adam.step(&mut self.params, &grads, SchedulePoint { lr, step })?;
            let loss = total / used as f64;
            report.losses.push(loss);
            self.record(LogRecord {
                stage: sched.stage,
                step,
                loss,
                lr,
                timestamp: now(),
            })?;
        }
        Ok(report)
    }

    fn record(&mut self, rec: LogRecord) -> Result<(), PipelineError> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        self.log.push(rec);
        Ok(())
    }
}

/// Marks exactly the stage's parameter groups trainable.
pub fn apply_freeze_mask(params: &mut ParameterSet, stage: StageId) {
    params.freeze_all();
    for prefix in stage.trainable_prefixes() {
        params.set_trainable_prefix(prefix, true);
    }
}

/// Longest random token string drawn for the transcription drill.
pub const COPY_MAX_TOKENS: usize = 8;

/// A transcription drill for the text LM: a random string of distinct
/// acoustic tokens rendered as stretched runs between silences, then copied
/// after `<bos>`. Fresh strings every time keep the LM from memorising the
/// training transcripts.
pub fn copy_example(vocab: &LmVocab, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut pool: Vec<usize> = (1..vocab.asr_vocab_size())
        .map(|t| vocab.from_asr(t).expect("in range"))
        .collect();
    let n = rng.random_range(1..=COPY_MAX_TOKENS.min(pool.len()));
    let (text, _) = pool.partial_shuffle(rng, n);
    let text = text.to_vec();
    let mut cue = vec![SIL; rng.random_range(0..=2)];
    for &t in &text {
        cue.extend(std::iter::repeat_n(t, rng.random_range(1..=3)));
    }
    cue.extend(std::iter::repeat_n(SIL, rng.random_range(2..=8)));
    (cue, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::seeded;

    #[test]
    fn dropout_bounds() {
        let mut rng = seeded(1);
        let prompt = vec![CTC_OPEN, 12, CTC_CLOSE];
        assert!(apply_prompt_dropout(&prompt, 0.5, &mut rng).is_err());
        assert!(apply_prompt_dropout(&prompt, -0.1, &mut rng).is_err());
        for _ in 0..1000 {
            assert_eq!(apply_prompt_dropout(&prompt, 0.0, &mut rng).unwrap(), prompt);
        }
        let dropped = (0..10_000)
            .filter(|_| apply_prompt_dropout(&prompt, 0.3, &mut rng).unwrap().len() == 2)
            .count();
        assert!((dropped as f64 / 10_000.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn freeze_masks_partition() {
        let mut p = ParameterSet::new();
        for name in ["encoder.a", "ctc.b", "lm.c", "text_lm.c", "llm_adapter.d", "acoustic_adapter.e", "detector.f"] {
            p.insert(name, Tensor::zeros(&[1])).unwrap();
        }
        apply_freeze_mask(&mut p, StageId::S3);
        let t: Vec<&str> = p.trainable_names().collect();
        assert_eq!(t, ["llm_adapter.d", "lm.c"]);
        apply_freeze_mask(&mut p, StageId::S1b);
        assert_eq!(p.trainable_names().collect::<Vec<_>>(), ["lm.c"]);
    }

    #[test]
    fn copy_example_runs() {
        let v = LmVocab::new(24);
        let mut rng = seeded(3);
        let (cue, text) = copy_example(&v, &mut rng);
        assert!(!text.is_empty() && text.len() <= COPY_MAX_TOKENS);
        let body: Vec<usize> = cue.iter().copied().filter(|&t| t != SIL).collect();
        let mut collapsed = body.clone();
        collapsed.dedup();
        assert_eq!(collapsed, text);
    }
}

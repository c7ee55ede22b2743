//! Streaming full-duplex sessions: chunked decoding, early commits, the
//! action policy and decision latency.

mod clock;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ctc::GreedyState;
use crate::data::TurnState;
use crate::encoder::{EncoderOutput, EncoderState};
use crate::model::{Decision, Mode, Model, ModelError};
use crate::nnkit::{ParameterSet, Tensor};

pub use clock::{Clock, ManualClock, MonotonicClock};

#[derive(Debug, Error)]
pub enum DuplexError {
    #[error("session already finalized")]
    Finalized,
    #[error("no frames consumed before finalize")]
    NoFrames,
    #[error("frame has {got} values, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::encoder::EncoderError> for DuplexError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        DuplexError::Model(e.into())
    }
}

impl From<crate::ctc::CtcError> for DuplexError {
    fn from(e: crate::ctc::CtcError) -> Self {
        DuplexError::Model(e.into())
    }
}

/// What the dialogue layer does with a committed state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplexAction {
    Respond,
    KeepListening,
    /// No-op signal: a backchannel never preempts the system's turn.
    IgnoreBackchannel,
    HoldAndWait,
}

pub fn policy(state: TurnState) -> DuplexAction {
    match state {
        TurnState::Complete => DuplexAction::Respond,
        TurnState::Incomplete => DuplexAction::KeepListening,
        TurnState::Backchannel => DuplexAction::IgnoreBackchannel,
        TurnState::Wait => DuplexAction::HoldAndWait,
    }
}

/// Where the cascaded path gets its transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AsrBackend {
    /// Streaming greedy CTC.
    Ctc,
    /// Autoregressive LM decoding from the adapted acoustic prefix, run once
    /// the segment has ended.
    Autoregressive { max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub mode: Mode,
    /// Confidence an early commit requires.
    pub tau: f64,
    /// Consecutive chunk evaluations that must agree above `tau`.
    pub k: usize,
    pub asr: AsrBackend,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unified,
            tau: 0.9,
            k: 2,
            asr: AsrBackend::Ctc,
        }
    }
}

impl SessionConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DuplexError> {
        if !(self.tau >= 0.0) {
            return Err(DuplexError::Config("tau must be non-negative".into()));
        }
        if self.k == 0 {
            return Err(DuplexError::Config("k must be at least 1".into()));
        }
        if matches!(self.asr, AsrBackend::Autoregressive { .. }) && self.mode != Mode::Cascaded {
            return Err(DuplexError::Config("autoregressive ASR only applies to cascaded mode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub state: TurnState,
    /// Probability of the winning state.
    pub confidence: f64,
    pub t_decision_ms: f64,
    pub t_segment_end_ms: f64,
    pub early: bool,
    pub frames_consumed_at_decision: usize,
}

impl DecisionRecord {
    pub fn action(&self) -> DuplexAction {
        policy(self.state)
    }

    pub fn latency_ms(&self) -> f64 {
        latency_ms(self)
    }

    pub fn lead_time_ms(&self) -> f64 {
        lead_time_ms(self)
    }
}

/// Time from segment end to decision, clamped at zero.
pub fn latency_ms(r: &DecisionRecord) -> f64 {
    (r.t_decision_ms - r.t_segment_end_ms).max(0.0)
}

/// How far ahead of the segment end an early decision landed.
pub fn lead_time_ms(r: &DecisionRecord) -> f64 {
    (r.t_segment_end_ms - r.t_decision_ms).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    TranscriptUpdate,
    EarlyDecision,
    FinalDecision,
}

/// One line of the session event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_ms: f64,
    pub event_type: EventType,
    pub payload: serde_json::Value,
}

impl Event {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

/// One streaming segment over shared read-only parameters.
pub struct Session<'a> {
    model: &'a Model,
    params: &'a ParameterSet,
    cfg: SessionConfig,
    clock: &'a dyn Clock,
    enc_state: EncoderState,
    greedy: GreedyState,
    encoded: EncoderOutput,
    pending: Vec<f64>,
    pending_arrival_ms: f64,
    /// End of the latest computation on the stream's timeline.
    busy_until_ms: f64,
    streak: Option<(TurnState, usize)>,
    committed: Option<DecisionRecord>,
    finalized: bool,
    frames_received: usize,
    pub events: Vec<Event>,
}

impl<'a> Session<'a> {
    pub fn new(
        model: &'a Model,
        params: &'a ParameterSet,
        cfg: SessionConfig,
        clock: &'a dyn Clock,
    ) -> Result<Self, DuplexError> {
        cfg.validate()?;
        let d = model.cfg.encoder.model_dim;
        Ok(Self {
            enc_state: model.encoder.fresh_state(),
            greedy: GreedyState::new(),
            encoded: EncoderOutput {
                top: Tensor::matrix(0, d, Vec::new()),
                mid: Tensor::matrix(0, d, Vec::new()),
            },
            pending: Vec::new(),
            pending_arrival_ms: 0.0,
            busy_until_ms: f64::NEG_INFINITY,
            streak: None,
            committed: None,
            finalized: false,
            frames_received: 0,
            events: Vec::new(),
            model,
            params,
            cfg,
            clock,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn transcript(&self) -> &[usize] {
        &self.greedy.transcript
    }

    pub fn committed(&self) -> Option<&DecisionRecord> {
        self.committed.as_ref()
    }

    /// Frames that have passed through the encoder.
    pub fn frames_consumed(&self) -> usize {
        self.enc_state.frames_consumed
    }

    /// Buffers `frames` (`n x input_dim`) that arrived at `arrival_time_ms`
    /// and processes every complete chunk. Returns the events this call
    /// produced.
    pub fn feed_frames(&mut self, frames: &Tensor, arrival_time_ms: f64) -> Result<Vec<Event>, DuplexError> {
        if self.finalized {
            return Err(DuplexError::Finalized);
        }
        let dim = self.model.cfg.encoder.input_dim;
        if frames.rows() > 0 && frames.cols() != dim {
            return Err(DuplexError::DimMismatch {
                got: frames.cols(),
                expected: dim,
            });
        }
        self.pending.extend_from_slice(frames.data());
        self.pending_arrival_ms = arrival_time_ms;
        self.frames_received += frames.rows();
        let first_new = self.events.len();
        let cf = self.model.cfg.encoder.chunk_frames;
        while self.pending.len() >= cf * dim {
            let chunk: Vec<f64> = self.pending.drain(..cf * dim).collect();
            self.process_chunk(Tensor::matrix(cf, dim, chunk), false, arrival_time_ms)?;
        }
        Ok(self.events[first_new..].to_vec())
    }

    /// Runs one chunk, then (if undecided) a decision evaluation, timing the
    /// work on the stream's timeline.
    fn process_chunk(&mut self, chunk: Tensor, is_final: bool, arrival_ms: f64) -> Result<(), DuplexError> {
        let start = arrival_ms.max(self.busy_until_ms);
        let t0 = self.clock.now_ms();
        let out = self
            .model
            .encoder
            .encode_chunk(self.params, &mut self.enc_state, &chunk, is_final)?;
        let mut emitted = Vec::new();
        if out.top.rows() > 0 {
            let lp = self.model.ctc.log_probs(self.params, &out.top).map_err(ModelError::from)?;
            emitted = self.greedy.step_all(&lp)?;
            let d = self.model.cfg.encoder.model_dim;
            self.encoded = EncoderOutput::concat(&[self.encoded.clone(), out], d);
        }
        if !emitted.is_empty() {
            let t = start + (self.clock.now_ms() - t0);
            self.events.push(Event {
                t_ms: t,
                event_type: EventType::TranscriptUpdate,
                payload: json!({ "tokens": emitted, "transcript": self.greedy.transcript }),
            });
        }
        if self.committed.is_none() && !is_final && self.may_commit_early() {
            let d = self.model.decide(self.params, self.cfg.mode, &self.encoded, &self.greedy.transcript)?;
            let t = start + (self.clock.now_ms() - t0);
            self.observe(d, t);
        }
        self.busy_until_ms = start + (self.clock.now_ms() - t0);
        Ok(())
    }

    fn may_commit_early(&self) -> bool {
        match (self.cfg.mode, self.cfg.asr) {
            (_, AsrBackend::Autoregressive { .. }) => false,
            (Mode::Cascaded, AsrBackend::Ctc) => !self.greedy.transcript.is_empty(),
            _ => self.encoded.top.rows() > 0,
        }
    }

    /// Early-commit rule: the same non-Incomplete state at probability
    /// `>= tau` for `k` consecutive evaluations.
    fn observe(&mut self, d: Decision, t_ms: f64) {
        let confident = d.confidence() >= self.cfg.tau && d.state != TurnState::Incomplete;
        self.streak = match (confident, self.streak) {
            (false, _) => None,
            (true, Some((s, n))) if s == d.state => Some((s, n + 1)),
            (true, _) => Some((d.state, 1)),
        };
        if let Some((state, n)) = self.streak {
            if n >= self.cfg.k {
                let rec = DecisionRecord {
                    state,
                    confidence: d.confidence(),
                    t_decision_ms: t_ms,
                    t_segment_end_ms: f64::NAN,
                    early: true,
                    frames_consumed_at_decision: self.enc_state.frames_consumed,
                };
                self.events.push(Event {
                    t_ms,
                    event_type: EventType::EarlyDecision,
                    payload: decision_payload(&rec, &d),
                });
                self.committed = Some(rec);
            }
        }
    }

    /// Ends the segment. An early commit is returned as recorded (with the
    /// segment end filled in); otherwise the mode's full decision path runs
    /// over all evidence.
    pub fn finalize_segment(&mut self, t_segment_end_ms: f64) -> Result<DecisionRecord, DuplexError> {
        if self.finalized {
            return Err(DuplexError::Finalized);
        }
        if self.frames_received == 0 {
            return Err(DuplexError::NoFrames);
        }
        self.finalized = true;
        let dim = self.model.cfg.encoder.input_dim;
        let arrival = t_segment_end_ms.max(self.pending_arrival_ms);
        let rest: Vec<f64> = std::mem::take(&mut self.pending);
        let n = rest.len() / dim;
        let total = self.frames_received;
        if let Some(mut rec) = self.committed.clone() {
            if n > 0 && !self.enc_state.finished {
                self.process_chunk(Tensor::matrix(n, dim, rest), true, arrival)?;
            }
            rec.t_segment_end_ms = t_segment_end_ms;
            rec.early = rec.frames_consumed_at_decision < total;
            self.committed = Some(rec.clone());
            return Ok(rec);
        }
        let start = arrival.max(self.busy_until_ms);
        let t0 = self.clock.now_ms();
        if !self.enc_state.finished {
            let out = self
                .model
                .encoder
                .encode_chunk(self.params, &mut self.enc_state, &Tensor::matrix(n, dim, rest), true)?;
            if out.top.rows() > 0 {
                let lp = self.model.ctc.log_probs(self.params, &out.top).map_err(ModelError::from)?;
                self.greedy.step_all(&lp)?;
                let d = self.model.cfg.encoder.model_dim;
                self.encoded = EncoderOutput::concat(&[self.encoded.clone(), out], d);
            }
        }
        let (d, transcript) = match self.cfg.asr {
            AsrBackend::Autoregressive { max_len } => {
                self.model.decide_cascaded_ar(self.params, &self.encoded.top, max_len)?
            }
            AsrBackend::Ctc => (
                self.model.decide(self.params, self.cfg.mode, &self.encoded, &self.greedy.transcript)?,
                self.greedy.transcript.clone(),
            ),
        };
        let t = start + (self.clock.now_ms() - t0);
        self.busy_until_ms = t;
        let rec = DecisionRecord {
            state: d.state,
            confidence: d.confidence(),
            t_decision_ms: t,
            t_segment_end_ms,
            early: false,
            frames_consumed_at_decision: self.enc_state.frames_consumed,
        };
        let mut payload = decision_payload(&rec, &d);
        payload["transcript"] = json!(transcript);
        self.events.push(Event {
            t_ms: t,
            event_type: EventType::FinalDecision,
            payload,
        });
        self.committed = Some(rec.clone());
        Ok(rec)
    }
}

fn decision_payload(rec: &DecisionRecord, d: &Decision) -> serde_json::Value {
    json!({
        "state": rec.state,
        "confidence": rec.confidence,
        "probs": d.probs,
        "action": rec.action(),
        "frames_consumed": rec.frames_consumed_at_decision,
    })
}

/// Streams `features` in chunk-sized pieces, each stamped with the arrival
/// time of its last frame, and finalizes at the time of the last frame.
pub fn run_segment(
    model: &Model,
    params: &ParameterSet,
    cfg: SessionConfig,
    clock: &dyn Clock,
    features: &Tensor,
    frame_period_ms: f64,
) -> Result<(DecisionRecord, Vec<Event>), DuplexError> {
    let mut s = Session::new(model, params, cfg, clock)?;
    let cf = model.cfg.encoder.chunk_frames;
    let t = features.rows();
    let mut start = 0;
    while start < t {
        let len = cf.min(t - start);
        s.feed_frames(&features.slice_rows(start, len), (start + len) as f64 * frame_period_ms)?;
        start += len;
    }
    let rec = s.finalize_segment(t as f64 * frame_period_ms)?;
    Ok((rec, s.events))
}

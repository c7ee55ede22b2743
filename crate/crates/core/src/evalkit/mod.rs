//! Turn-detection metrics, token error rates, mode evaluation and reports.

mod report;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, TurnState};
use crate::duplex::{run_segment, Clock, DuplexError, SessionConfig};
use crate::model::Model;
use crate::nnkit::ParameterSet;

pub use report::{emit_report, format_pct, render_table, ClassResult, Report};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("{0} is undefined: its denominator is zero")]
    Undefined(&'static str),
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("report is missing results for class {0}")]
    MissingClass(TurnState),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Duplex(#[from] DuplexError),
}

/// One-vs-rest counts for `positive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub positive_class: TurnState,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(
    predictions: &[TurnState],
    labels: &[TurnState],
    positive: TurnState,
) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
        positive_class: positive,
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, name: &'static str) -> Result<Ratio<u64>, EvalError> {
    if den == 0 {
        Err(EvalError::Undefined(name))
    } else {
        Ok(Ratio::new(num, den))
    }
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `(tp + tn) / total`, exactly.
pub fn accuracy_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, EvalError> {
    ratio(c.tp + c.tn, c.total(), "accuracy")
}

/// `fn / (tp + fn)`, exactly.
pub fn miss_rate_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, EvalError> {
    ratio(c.fn_, c.tp + c.fn_, "miss rate")
}

/// `fp / (fp + tn)`, exactly.
pub fn false_alarm_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, EvalError> {
    ratio(c.fp, c.fp + c.tn, "false alarm rate")
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64, EvalError> {
    accuracy_exact(c).map(to_f64)
}

pub fn miss_rate(c: &ConfusionCounts) -> Result<f64, EvalError> {
    miss_rate_exact(c).map(to_f64)
}

pub fn false_alarm(c: &ConfusionCounts) -> Result<f64, EvalError> {
    false_alarm_exact(c).map(to_f64)
}

/// Four-way accuracy over all samples.
pub fn multiclass_accuracy(predictions: &[TurnState], labels: &[TurnState]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = up;
        }
    }
    row[b.len()]
}

/// Edit distance normalised by the reference length; may exceed 1.
pub fn edit_error_rate<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Total edits over total reference tokens across a corpus.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64, EvalError> {
    let (edits, len) = pairs
        .iter()
        .fold((0, 0), |(e, n), (h, r)| (e + edit_distance(h, r), n + r.len()));
    if len == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(edits as f64 / len as f64)
}

/// Per-sample outcome of a streamed evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: String,
    pub label: TurnState,
    pub prediction: TurnState,
    pub confidence: f64,
    pub latency_ms: f64,
    pub lead_time_ms: f64,
    pub early: bool,
}

/// Streams every sample through a fresh session.
pub fn evaluate(
    model: &Model,
    params: &ParameterSet,
    cfg: &SessionConfig,
    clock: &dyn Clock,
    samples: &[Sample],
) -> Result<Vec<Outcome>, EvalError> {
    samples
        .iter()
        .map(|s| {
            let period = f64::from(s.features.frame_period_ms());
            let (rec, _) = run_segment(model, params, cfg.clone(), clock, &s.features.to_tensor(), period)?;
            Ok(Outcome {
                id: s.id.clone(),
                label: s.turn_state,
                prediction: rec.state,
                confidence: rec.confidence,
                latency_ms: rec.latency_ms(),
                lead_time_ms: rec.lead_time_ms(),
                early: rec.early,
            })
        })
        .collect()
}

/// Summarises outcomes into per-class and overall figures.
pub fn summarize(mode: &str, test_set: &str, outcomes: &[Outcome]) -> Result<Report, EvalError> {
    let preds: Vec<TurnState> = outcomes.iter().map(|o| o.prediction).collect();
    let labels: Vec<TurnState> = outcomes.iter().map(|o| o.label).collect();
    let overall_acc = multiclass_accuracy(&preds, &labels)?;
    let classes = TurnState::ALL
        .into_iter()
        .map(|state| {
            let c = confusion(&preds, &labels, state)?;
            Ok(ClassResult {
                name: state,
                acc: accuracy(&c).ok(),
                miss: miss_rate(&c).ok(),
                fa: false_alarm(&c).ok(),
                n: c.tp + c.fn_,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mean_latency_ms = outcomes.iter().map(|o| o.latency_ms).sum::<f64>() / outcomes.len() as f64;
    Ok(Report {
        mode: mode.to_string(),
        test_set: test_set.to_string(),
        classes,
        overall_acc,
        mean_latency_ms: Some(mean_latency_ms),
        n_samples: outcomes.len(),
    })
}

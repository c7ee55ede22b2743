use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DataError, FeatureMatrix};

/// The four turn states a segment can end in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnState {
    Complete,
    Incomplete,
    Backchannel,
    Wait,
}

impl TurnState {
    /// Canonical order used for logits, reports and class histograms.
    pub const ALL: [TurnState; 4] = [
        TurnState::Complete,
        TurnState::Incomplete,
        TurnState::Backchannel,
        TurnState::Wait,
    ];

    pub fn index(self) -> usize {
        match self {
            TurnState::Complete => 0,
            TurnState::Incomplete => 1,
            TurnState::Backchannel => 2,
            TurnState::Wait => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TurnState::Complete => "complete",
            TurnState::Incomplete => "incomplete",
            TurnState::Backchannel => "backchannel",
            TurnState::Wait => "wait",
        }
    }
}

impl fmt::Display for TurnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TurnState {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DataError::UnknownTurnState(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthesized,
}

/// Half-open frame span `[start, end)` of one token.
pub type Span = (usize, usize);

/// One labelled segment: token transcript with per-token frame alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub turn_state: TurnState,
    pub tokens: Vec<usize>,
    pub alignments: Vec<Span>,
    pub features: Arc<FeatureMatrix>,
    pub source: Source,
}

/// Checks that spans are non-empty, non-overlapping, increasing and inside
/// `[0, num_frames)`.
pub fn validate_alignments(tokens: usize, spans: &[Span], num_frames: usize) -> Result<(), String> {
    if tokens != spans.len() {
        return Err(format!("{tokens} tokens but {} alignment spans", spans.len()));
    }
    let mut prev_end = 0;
    for (i, &(s, e)) in spans.iter().enumerate() {
        if s >= e {
            return Err(format!("span {i} [{s}, {e}) is empty or reversed"));
        }
        if s < prev_end {
            return Err(format!("span {i} starts at {s} before previous end {prev_end}"));
        }
        if e > num_frames {
            return Err(format!("span {i} ends at {e} beyond {num_frames} frames"));
        }
        prev_end = e;
    }
    Ok(())
}

impl Sample {
    pub fn validate(&self) -> Result<(), DataError> {
        validate_alignments(self.tokens.len(), &self.alignments, self.features.num_frames())
            .map_err(|msg| DataError::Alignment(format!("{}: {msg}", self.id)))
    }

    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }

    pub fn duration_ms(&self) -> f64 {
        self.features.duration_ms()
    }
}

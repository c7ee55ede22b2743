use serde::{Deserialize, Serialize};

use super::LmError;
use crate::data::TurnState;

/// Special tokens, in id order.
pub const SPECIALS: [&str; 9] = [
    "<bos>",
    "<eos>",
    "<ctc>",
    "</ctc>",
    "<complete>",
    "<incomplete>",
    "<backchannel>",
    "<wait>",
    "<sil>",
];
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const CTC_OPEN: usize = 2;
pub const CTC_CLOSE: usize = 3;
pub const TURN_BASE: usize = 4;
pub const SIL: usize = 8;
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// LM vocabulary: the specials followed by every non-blank acoustic token.
/// Acoustic token `a` (1-based, blank 0 excluded) maps to `NUM_SPECIALS + a - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmVocab {
    asr_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: usize,
    pub text: String,
    pub special: bool,
}

impl LmVocab {
    /// `asr_vocab_size` counts the blank.
    pub fn new(asr_vocab_size: usize) -> Self {
        Self { asr_vocab_size }
    }

    pub fn len(&self) -> usize {
        NUM_SPECIALS + self.asr_vocab_size.saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn asr_vocab_size(&self) -> usize {
        self.asr_vocab_size
    }

    pub fn turn_token(state: TurnState) -> usize {
        TURN_BASE + state.index()
    }

    pub fn turn_tokens() -> [usize; 4] {
        TurnState::ALL.map(Self::turn_token)
    }

    pub fn from_asr(&self, token: usize) -> Result<usize, LmError> {
        if token == 0 || token >= self.asr_vocab_size {
            return Err(LmError::Vocab(format!(
                "acoustic token {token} has no LM entry (acoustic vocabulary {})",
                self.asr_vocab_size
            )));
        }
        Ok(NUM_SPECIALS + token - 1)
    }

    /// Maps a whole acoustic token sequence.
    pub fn map_asr(&self, tokens: &[usize]) -> Result<Vec<usize>, LmError> {
        tokens.iter().map(|&t| self.from_asr(t)).collect()
    }

    pub fn to_asr(&self, id: usize) -> Option<usize> {
        (NUM_SPECIALS..self.len()).contains(&id).then(|| id - NUM_SPECIALS + 1)
    }

    pub fn entries(&self) -> Vec<VocabEntry> {
        (0..self.len())
            .map(|id| VocabEntry {
                id,
                text: SPECIALS
                    .get(id)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("tok{}", id - NUM_SPECIALS + 1)),
                special: id < NUM_SPECIALS,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let entries: Vec<VocabEntry> = serde_json::from_str(text).map_err(|e| LmError::Vocab(e.to_string()))?;
        let v = LmVocab::new(entries.len().saturating_sub(NUM_SPECIALS) + 1);
        if entries.len() < NUM_SPECIALS || v.entries() != entries {
            return Err(LmError::Vocab("vocabulary table does not match the expected layout".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_round_trips() {
        let v = LmVocab::new(24);
        assert_eq!(v.len(), NUM_SPECIALS + 23);
        for a in 1..24 {
            assert_eq!(v.to_asr(v.from_asr(a).unwrap()), Some(a));
        }
        assert!(v.from_asr(0).is_err());
        assert!(v.from_asr(24).is_err());
        assert_eq!(v.to_asr(BOS), None);
    }

    #[test]
    fn json_round_trip() {
        let v = LmVocab::new(7);
        let back = LmVocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(LmVocab::from_json("[]").is_err());
        assert_eq!(LmVocab::turn_tokens(), [4, 5, 6, 7]);
    }
}

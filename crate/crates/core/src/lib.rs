//! Streaming turn detection: a chunked conformer encoder with a CTC head
//! feeding a small causal language model, acoustic/semantic fusion into a
//! turn-state detector, staged training and a full-duplex session layer.

pub mod ctc;
pub mod data;
pub mod duplex;
pub mod encoder;
pub mod evalkit;
pub mod fusion;
pub mod langmodel;
pub mod model;
pub mod nnkit;
pub mod pipeline;

pub use data::{Sample, SynthConfig, TurnState};
pub use duplex::{DecisionRecord, DuplexAction, SessionConfig};
pub use evalkit::Report;
pub use model::{Decision, Mode, Model, ModelConfig};
pub use nnkit::{ParameterSet, Tensor};
pub use pipeline::{StageId, TrainConfig, Trainer};

use std::fmt;

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Prompt dropout must stay strictly below this.
pub const MAX_PROMPT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "1a")]
    S1a,
    #[serde(rename = "1b")]
    S1b,
    #[serde(rename = "2")]
    S2,
    #[serde(rename = "3")]
    S3,
    #[serde(rename = "4")]
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CtcAsr,
    LmTextTurn,
    AdapterAsr,
    JointTurn,
    FusionTurn,
}

impl StageId {
    pub const ALL: [StageId; 5] = [StageId::S1a, StageId::S1b, StageId::S2, StageId::S3, StageId::S4];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::S1a => "1a",
            StageId::S1b => "1b",
            StageId::S2 => "2",
            StageId::S3 => "3",
            StageId::S4 => "4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    pub fn objective(self) -> Objective {
        match self {
            StageId::S1a => Objective::CtcAsr,
            StageId::S1b => Objective::LmTextTurn,
            StageId::S2 => Objective::AdapterAsr,
            StageId::S3 => Objective::JointTurn,
            StageId::S4 => Objective::FusionTurn,
        }
    }

    /// Parameter-name prefixes updated in this stage; everything else is
    /// frozen.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            StageId::S1a => &["encoder.", "ctc."],
            StageId::S1b => &["lm."],
            StageId::S2 => &["llm_adapter."],
            StageId::S3 => &["lm.", "llm_adapter."],
            StageId::S4 => &["acoustic_adapter.", "detector."],
        }
    }

    /// True when `name` is frozen during this stage.
    pub fn freezes(self, name: &str) -> bool {
        !self.trainable_prefixes().iter().any(|p| name.starts_with(p))
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub stage: StageId,
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl StageSchedule {
    pub fn new(stage: StageId, lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            stage,
            lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn objective(&self) -> Objective {
        self.stage.objective()
    }

    /// Learning rate at 1-based `step`: linear ramp `lr * step / warmup`
    /// below the warmup length, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config(format!("stage {}: lr must be positive", self.stage)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(PipelineError::Config(format!(
                "stage {}: warmup_steps {} exceeds total_steps {}",
                self.stage, self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub prompt_dropout_p: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Share of text-stage examples that drill transcription instead of
    /// turn prediction.
    pub copy_task_fraction: f64,
    /// Share of alignment-stage examples assembled from spliced token
    /// segments instead of whole corpus utterances.
    pub splice_fraction: f64,
    pub stages: Vec<StageSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Budgets sized for the synthetic corpus on one core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            prompt_dropout_p: 0.3,
            grad_clip: 5.0,
            copy_task_fraction: 0.5,
            splice_fraction: 0.5,
            stages: vec![
                StageSchedule::new(StageId::S1a, 3e-3, 50, 500),
                StageSchedule::new(StageId::S1b, 3e-3, 30, 2000),
                StageSchedule::new(StageId::S2, 3e-3, 30, 1500),
                StageSchedule::new(StageId::S3, 1e-3, 0, 500),
                StageSchedule::new(StageId::S4, 3e-3, 0, 500),
            ],
        }
    }

    /// Learning rates and warmup of the full-size recipe; stage 1b's two
    /// epochs and the unstated stage-2 budget are expressed as step counts.
    pub fn full_scale() -> Self {
        Self {
            stages: vec![
                StageSchedule::new(StageId::S1a, 1e-4, 8_000, 80_000),
                StageSchedule::new(StageId::S1b, 1e-5, 0, 11_000),
                StageSchedule::new(StageId::S2, 1e-4, 0, 11_000),
                StageSchedule::new(StageId::S3, 5e-6, 0, 11_000),
                StageSchedule::new(StageId::S4, 1e-4, 0, 11_000),
            ],
            ..Self::desk()
        }
    }

    /// Scales every step budget (and warmup) by `f`, keeping at least one step.
    pub fn scaled(mut self, f: f64) -> Self {
        for s in &mut self.stages {
            s.total_steps = ((s.total_steps as f64 * f).round() as u64).max(1);
            s.warmup_steps = ((s.warmup_steps as f64 * f).round() as u64).min(s.total_steps);
        }
        self
    }

    pub fn schedule(&self, stage: StageId) -> Result<&StageSchedule, PipelineError> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| PipelineError::Config(format!("no schedule for stage {stage}")))
    }

    pub fn schedule_mut(&mut self, stage: StageId) -> Option<&mut StageSchedule> {
        self.stages.iter_mut().find(|s| s.stage == stage)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        check_dropout(self.prompt_dropout_p)?;
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.copy_task_fraction) {
            return Err(PipelineError::Config("copy_task_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.splice_fraction) {
            return Err(PipelineError::Config("splice_fraction must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(PipelineError::Config("grad_clip must be non-negative".into()));
        }
        let mut seen = Vec::new();
        for s in &self.stages {
            s.validate()?;
            if seen.last().is_some_and(|&prev| prev >= s.stage) {
                return Err(PipelineError::Config(format!(
                    "stage {} listed out of order or twice",
                    s.stage
                )));
            }
            seen.push(s.stage);
        }
        Ok(())
    }
}

pub(super) fn check_dropout(p: f64) -> Result<(), PipelineError> {
    if (0.0..MAX_PROMPT_DROPOUT).contains(&p) {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "prompt_dropout_p {p} outside [0, {MAX_PROMPT_DROPOUT})"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let s = StageSchedule::new(StageId::S1a, 1e-3, 10, 100);
        for step in 1..10 {
            assert_eq!(s.lr_at(step), 1e-3 * step as f64 / 10.0);
        }
        assert_eq!(s.lr_at(10), 1e-3);
        assert_eq!(s.lr_at(99), 1e-3);
        assert_eq!(StageSchedule::new(StageId::S3, 2e-3, 0, 5).lr_at(1), 2e-3);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.prompt_dropout_p = 0.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.stages[0].warmup_steps = 1000;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.stages.swap(0, 1);
        assert!(c.validate().is_err());
        let t: TrainConfig = toml::from_str("seed = 3\n[[stages]]\nstage = \"1a\"\nlr = 0.1\ntotal_steps = 2\n").unwrap();
        assert_eq!(t.stages.len(), 1);
        assert_eq!(t.seed, 3);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}

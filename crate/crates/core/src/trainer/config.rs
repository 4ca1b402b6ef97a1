use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticSpec;
use crate::encoder::ModelConfig;
use crate::losses::{LossFlags, NceForm, SimilarityConfig};
use crate::membank::BankInit;
use crate::sampling::NegativeSource;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelRefresh {
    /// Recomputed for each batch's target clips from the current forward pass.
    #[default]
    PerStep,
    /// Recomputed for the whole target set (centered windows) at each epoch start.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Memory-bank momentum δ.
    pub bank_momentum: f64,
    pub lambda: f64,
    /// Pseudo-label confidence threshold T.
    pub threshold: f64,
    pub window_length: usize,
    /// Clips per domain per step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_decay: f64,
    pub total_steps: u64,
    /// SGD momentum; 0 gives plain SGD.
    pub optimizer_momentum: f64,
    /// Rescales the full gradient to at most this L2 norm; 0 disables.
    pub max_grad_norm: f64,
    pub enable_mo: bool,
    pub enable_do: bool,
    pub enable_self_training_baseline: bool,
    /// Cross-modal loss with one log over sums across anchors.
    pub literal_eq2: bool,
    /// Source cross-entropy on each stream's logits (summed) rather than on
    /// the fused logits.
    pub per_stream_ce: bool,
    pub cross_modal_negatives: usize,
    pub cross_domain_positives: usize,
    pub cross_domain_negatives: usize,
    pub negative_source: NegativeSource,
    /// Fraction of `total_steps` before pseudo-label losses switch on.
    pub warmup_fraction: f64,
    pub pseudo_label_refresh: PseudoLabelRefresh,
    /// Probability of flipping each accepted pseudo-label to another class.
    pub pseudo_label_noise: f64,
    pub bank_init: BankInit,
    /// Steps between evaluations during `run_training`; 0 evaluates only at
    /// the end.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            bank_momentum: 0.5,
            lambda: 1.25,
            threshold: 0.8,
            window_length: 16,
            batch_size: 16,
            base_lr: 0.01,
            lr_milestones: vec![1000],
            lr_decay: 0.1,
            total_steps: 2000,
            optimizer_momentum: 0.0,
            max_grad_norm: 0.0,
            enable_mo: true,
            enable_do: true,
            enable_self_training_baseline: false,
            literal_eq2: false,
            per_stream_ce: true,
            cross_modal_negatives: 64,
            cross_domain_positives: 4,
            cross_domain_negatives: 64,
            negative_source: NegativeSource::Both,
            warmup_fraction: 0.1,
            pseudo_label_refresh: PseudoLabelRefresh::PerStep,
            pseudo_label_noise: 0.0,
            bank_init: BankInit::RandomUnit,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad("bank_momentum must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("threshold must lie in (0, 1]");
        }
        if self.window_length == 0 || self.batch_size == 0 {
            return bad("window_length and batch_size must be positive");
        }
        if self.enable_mo && self.batch_size < 2 {
            return bad("the cross-modal loss needs batch_size >= 2");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.lr_decay > 0.0) {
            return bad("base_lr and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.optimizer_momentum) {
            return bad("optimizer_momentum must lie in [0, 1)");
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("max_grad_norm must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.pseudo_label_noise) {
            return bad("warmup_fraction and pseudo_label_noise must lie in [0, 1]");
        }
        if self.cross_domain_positives == 0 || self.cross_domain_negatives == 0 {
            return bad("cross-domain positive and negative counts must be positive");
        }
        Ok(())
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags {
            enable_mo: self.enable_mo,
            enable_do: self.enable_do,
            enable_self_training_baseline: self.enable_self_training_baseline,
        }
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig::new(self.temperature)
    }

    pub fn nce_form(&self) -> NceForm {
        if self.literal_eq2 {
            NceForm::SummedInsideLog
        } else {
            NceForm::PerAnchor
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// `base_lr × decay^(milestones passed)`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

/// Settings for multi-seed experiments (ablation and sensitivity grids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub sensitivity_lambdas: Vec<f64>,
    pub sensitivity_thresholds: Vec<f64>,
    /// Run seeds and settings on the rayon pool; each run stays single-threaded.
    pub parallel: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            sensitivity_lambdas: vec![1.0, 1.25, 1.5],
            sensitivity_thresholds: vec![0.6, 0.8, 0.9],
            parallel: true,
        }
    }
}

/// Everything one run needs; the JSON config file mirrors this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.trainer.validate()?;
        if self.data.clip_length < self.trainer.window_length {
            return Err(Error::Config(format!(
                "clip_length {} is shorter than window_length {}",
                self.data.clip_length, self.trainer.window_length
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.temperature, 0.1);
        assert_eq!(c.bank_momentum, 0.5);
        assert_eq!(c.lambda, 1.25);
        assert_eq!(c.threshold, 0.8);
        assert_eq!(c.window_length, 16);
        assert_eq!(c.base_lr, 0.01);
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule_steps_down_at_milestones() {
        let c = TrainConfig {
            lr_milestones: vec![10, 20],
            ..Default::default()
        };
        assert_eq!(c.learning_rate(0), 0.01);
        assert_eq!(c.learning_rate(9), 0.01);
        assert_eq!(c.learning_rate(10), 0.01 * 0.1);
        assert_eq!(c.learning_rate(25), 0.01 * 0.1f64.powi(2));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { threshold: 1.01, ..Default::default() },
            TrainConfig { threshold: 0.0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { bank_momentum: 1.5, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"trainer": {"lamda": 1.0}}"#);
        assert!(err.is_err());
    }
}

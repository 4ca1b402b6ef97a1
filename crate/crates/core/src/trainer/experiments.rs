//! Multi-seed ablation, self-training comparison and sensitivity grids.
//!
//! Each run regenerates the synthetic corpus with `data.seed + seed`, trains
//! with `trainer.seed = seed` and scores the mean target accuracy over the
//! last three evaluations. Runs are independent, so they can be spread over
//! the rayon pool without affecting any single run's result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_training, ExperimentConfig, TrainConfig, TrainState, TrainingData, TrainingHistory};
use crate::datagen::{generate_corpus, Corpus, SyntheticSpec};
use crate::evalviz::{eval_report, EvalReport};
use crate::{Domain, Result};

/// Number of trailing evaluations averaged into a run's score.
pub const SCORE_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    ModalityOnly,
    DomainOnly,
    Full,
    /// Hard pseudo-label cross-entropy instead of the cross-domain term.
    SelfTraining,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::SourceOnly, Variant::ModalityOnly, Variant::DomainOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::ModalityOnly => "modality-only",
            Variant::DomainOnly => "domain-only",
            Variant::Full => "full",
            Variant::SelfTraining => "self-training",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (mo, dom, st) = match self {
            Variant::SourceOnly => (false, false, false),
            Variant::ModalityOnly => (true, false, false),
            Variant::DomainOnly => (false, true, false),
            Variant::Full => (true, true, false),
            Variant::SelfTraining => (false, false, true),
        };
        TrainConfig {
            enable_mo: mo,
            enable_do: dom,
            enable_self_training_baseline: st,
            ..base.clone()
        }
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub target_accuracy: f64,
    pub source_accuracy: f64,
    pub retrieval_precision_at_1: f64,
    pub final_report: EvalReport,
}

pub fn corpus_for_seed(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    generate_corpus(&SyntheticSpec {
        seed: spec.seed.wrapping_add(seed),
        ..spec.clone()
    })
}

fn tail_mean(history: &TrainingHistory, f: impl Fn(&EvalReport) -> f64) -> f64 {
    let tail = &history.evals[history.evals.len().saturating_sub(SCORE_WINDOW)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

/// Trains `trainer` on a prebuilt corpus and evaluates transductively on the
/// target clips with their held-out labels. Also returns the final state so
/// callers can inspect the trained model.
pub fn train_and_score(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    trainer: &TrainConfig,
) -> Result<(RunResult, TrainingHistory, TrainState)> {
    let source = corpus.domain_clips(Domain::Source);
    let target = corpus.domain_clips(Domain::Target);
    let data = TrainingData::new(&source, &target, corpus.spec.num_classes, corpus.spec.frame_size, trainer)?;
    let evaluator = |model: &crate::encoder::TwoStreamModel, step: u64| eval_report(model, &source, &target, step);
    let (state, history) = run_training(&data, &cfg.model, trainer, Some(&evaluator))?;
    let final_report = history
        .evals
        .last()
        .cloned()
        .ok_or_else(|| crate::Error::Config("training produced no evaluation".into()))?;
    let result = RunResult {
        seed: trainer.seed,
        target_accuracy: tail_mean(&history, |e| e.top1_target),
        source_accuracy: tail_mean(&history, |e| e.top1_source),
        retrieval_precision_at_1: tail_mean(&history, |e| e.retrieval_precision_at_1),
        final_report,
    };
    Ok((result, history, state))
}

/// One seed of one setting.
pub fn run_seed(cfg: &ExperimentConfig, trainer: &TrainConfig, seed: u64) -> Result<RunResult> {
    let corpus = corpus_for_seed(&cfg.data, seed)?;
    let trainer = TrainConfig { seed, ..trainer.clone() };
    Ok(train_and_score(&corpus, cfg, &trainer)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub lambda: f64,
    pub threshold: f64,
    pub pseudo_label_noise: f64,
    pub mean_target_accuracy: f64,
    pub std_target_accuracy: f64,
    pub mean_source_accuracy: f64,
    pub mean_retrieval_precision_at_1: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn row(&self, name: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,lambda,threshold,pseudo_label_noise,mean_target_top1,std_target_top1,mean_source_top1,mean_retrieval_p1,seeds\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.name,
                r.lambda,
                r.threshold,
                r.pseudo_label_noise,
                r.mean_target_accuracy,
                r.std_target_accuracy,
                r.mean_source_accuracy,
                r.mean_retrieval_precision_at_1,
                r.runs.len()
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| setting | λ | T | noise | target top-1 | ± | source top-1 | retrieval P@1 |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.name,
                r.lambda,
                r.threshold,
                r.pseudo_label_noise,
                100.0 * r.mean_target_accuracy,
                100.0 * r.std_target_accuracy,
                100.0 * r.mean_source_accuracy,
                100.0 * r.mean_retrieval_precision_at_1
            ));
        }
        out
    }
}

fn summarize(name: String, trainer: &TrainConfig, runs: Vec<RunResult>) -> GridRow {
    let n = runs.len().max(1) as f64;
    let mean = |f: fn(&RunResult) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let mt = mean(|r| r.target_accuracy);
    let var = runs.iter().map(|r| (r.target_accuracy - mt).powi(2)).sum::<f64>() / n;
    GridRow {
        name,
        lambda: trainer.lambda,
        threshold: trainer.threshold,
        pseudo_label_noise: trainer.pseudo_label_noise,
        mean_target_accuracy: mt,
        std_target_accuracy: var.sqrt(),
        mean_source_accuracy: mean(|r| r.source_accuracy),
        mean_retrieval_precision_at_1: mean(|r| r.retrieval_precision_at_1),
        runs,
    }
}

/// Runs every `(name, trainer)` setting over all configured seeds.
pub fn run_grid(cfg: &ExperimentConfig, settings: &[(String, TrainConfig)]) -> Result<GridTable> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = (0..settings.len())
        .flat_map(|i| cfg.experiment.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run = |&(i, seed): &(usize, u64)| run_seed(cfg, &settings[i].1, seed).map(|r| (i, r));
    let results: Vec<(usize, RunResult)> = if cfg.experiment.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut per: Vec<Vec<RunResult>> = vec![Vec::new(); settings.len()];
    for (i, r) in results {
        per[i].push(r);
    }
    Ok(GridTable {
        rows: settings
            .iter()
            .zip(per)
            .map(|((name, t), runs)| summarize(name.clone(), t, runs))
            .collect(),
    })
}

/// Source-only, modality-only, domain-only and full.
pub fn ablation_settings(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    Variant::ABLATION.iter().map(|v| (v.name().to_string(), v.apply(base))).collect()
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<GridTable> {
    run_grid(cfg, &ablation_settings(&cfg.trainer))
}

/// Cross-domain contrastive term against hard pseudo-label self-training,
/// with clean and with `noise` flipped pseudo-labels.
pub fn self_training_settings(base: &TrainConfig, noise: f64) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for (suffix, n) in [("", 0.0), ("+noise", noise)] {
        for v in [Variant::DomainOnly, Variant::SelfTraining] {
            out.push((
                format!("{}{suffix}", v.name()),
                TrainConfig {
                    pseudo_label_noise: n,
                    ..v.apply(base)
                },
            ));
        }
    }
    out
}

pub fn run_self_training_comparison(cfg: &ExperimentConfig, noise: f64) -> Result<GridTable> {
    run_grid(cfg, &self_training_settings(&cfg.trainer, noise))
}

/// One knob at a time around the base setting: each λ with the base T, then
/// each T with the base λ, preceded by the source-only reference row.
pub fn sensitivity_settings(cfg: &ExperimentConfig) -> Vec<(String, TrainConfig)> {
    let base = Variant::Full.apply(&cfg.trainer);
    let mut out = vec![("source-only".to_string(), Variant::SourceOnly.apply(&cfg.trainer))];
    for &l in &cfg.experiment.sensitivity_lambdas {
        for &t in &cfg.experiment.sensitivity_thresholds {
            out.push((
                format!("lambda={l} threshold={t}"),
                TrainConfig {
                    lambda: l,
                    threshold: t,
                    ..base.clone()
                },
            ));
        }
    }
    out
}

pub fn run_sensitivity(cfg: &ExperimentConfig) -> Result<GridTable> {
    run_grid(cfg, &sensitivity_settings(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_grid_is_lambda_by_threshold_plus_reference() {
        let cfg = ExperimentConfig::default();
        let s = sensitivity_settings(&cfg);
        assert_eq!(s.len(), 10);
        assert!(s.iter().any(|(n, t)| n == "lambda=1.5 threshold=0.6" && t.lambda == 1.5 && t.threshold == 0.6));
        assert!(s[1..].iter().all(|(_, t)| t.enable_mo && t.enable_do));
    }

    #[test]
    fn variants_toggle_flags() {
        let base = TrainConfig::default();
        let so = Variant::SourceOnly.apply(&base);
        assert!(!so.enable_mo && !so.enable_do && !so.enable_self_training_baseline);
        let st = Variant::SelfTraining.apply(&base);
        assert!(!st.enable_do && st.enable_self_training_baseline);
        assert_eq!(ablation_settings(&base).len(), 4);
        assert_eq!(self_training_settings(&base, 0.3)[3].1.pseudo_label_noise, 0.3);
    }
}

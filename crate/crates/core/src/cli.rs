//! `cvda` command-line interface.
//!
//! Every subcommand resolves its configuration as defaults, then the
//! `--config` JSON file, then `--set dotted.key=value` overrides, and writes
//! the result to `resolved_config.json` in the output directory. Feeding that
//! file back with `--config` reproduces the run.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures. Failures print one JSON line to stderr:
//! `{"error":"config","message":"..."}`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::datagen::{generate_corpus, load_corpus, load_feature_file, save_corpus, Corpus};
use crate::evalviz::{dump_embeddings, eval_report, feature_records, retrieve, EmbeddingSpace};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::experiments::{run_ablation, run_self_training_comparison, run_sensitivity, GridTable};
use crate::trainer::{train_until, ExperimentConfig, TrainState, TrainingData, TrainingHistory};
use crate::{Domain, Error, Modality, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "cvda", version, about = "Contrastive two-stream video domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override one config field, e.g. `--set trainer.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelInput {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory written by `gen-data`; generated from the config
    /// when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Pre,
    Post,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Appearance,
    Motion,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; writes a checkpoint, loss log and evaluation reports.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) at this step without changing the schedule.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Evaluate a checkpoint on both domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// Target-to-source nearest-neighbor retrieval.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to encode the corpus with; not needed with feature files.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Precomputed query features (feature-file CSV).
        #[arg(long, requires = "gallery_features")]
        query_features: Option<PathBuf>,
        /// Precomputed gallery features (feature-file CSV).
        #[arg(long, requires = "query_features")]
        gallery_features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "appearance")]
        modality: ModalityArg,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Export per-clip embeddings before and/or after the projection head.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, value_enum, default_value = "both")]
        space: SpaceArg,
    },
    /// Source-only / modality-only / domain-only / full grid over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also compare against pseudo-label self-training, clean and with
        /// this fraction of flipped pseudo-labels.
        #[arg(long)]
        self_training_noise: Option<f64>,
    },
    /// λ and T sensitivity grid over seeds.
    Sensitivity {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Retrieve { common, .. }
            | Command::DumpEmbeddings { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sensitivity { common } => common,
        }
    }
}

/// Applies `key=value` to a JSON tree. The key must already exist; values are
/// parsed as JSON and fall back to plain strings.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let mut node = &mut *root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the file, then overrides; unknown keys anywhere are errors.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Reject unknown keys in the file before merging hides them.
        serde_json::from_value::<ExperimentConfig>(patch.clone()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, patch);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn corpus_from(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(d) => load_corpus(d),
        None => generate_corpus(&cfg.data),
    }
}

fn write_table(out: &Path, stem: &str, table: &GridTable) -> Result<()> {
    write_json(&out.join(format!("{stem}.json")), table)?;
    write_text(&out.join(format!("{stem}.csv")), &table.to_csv())?;
    write_text(&out.join(format!("{stem}.md")), &table.to_markdown())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn run(cmd: &Command) -> std::result::Result<(), (i32, Error)> {
    let common = cmd.common();
    let cfg = resolve_config(common.config.as_deref(), &common.overrides).map_err(|e| (2, e))?;
    let out = &common.out;
    let rt = |e: Error| (1, e);
    std::fs::create_dir_all(out).map_err(|e| (1, Error::io(out, e)))?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg).map_err(rt)?;

    match cmd {
        Command::GenData { .. } => {
            let corpus = generate_corpus(&cfg.data).map_err(rt)?;
            save_corpus(&corpus, &out.join("corpus")).map_err(rt)?;
            println!("{}", corpus.fingerprint());
        }
        Command::Train {
            corpus, resume, stop_at, ..
        } => train(&cfg, out, corpus.as_deref(), resume.as_deref(), *stop_at).map_err(rt)?,
        Command::Eval { input, .. } => {
            let ck = load_checkpoint(&input.checkpoint).map_err(rt)?;
            let corpus = corpus_from(&cfg, input.corpus.as_deref()).map_err(rt)?;
            let report = eval_report(
                &ck.state.model,
                &corpus.domain_clips(Domain::Source),
                &corpus.domain_clips(Domain::Target),
                ck.state.step,
            )
            .map_err(rt)?;
            write_json(&out.join("eval_report.json"), &report).map_err(rt)?;
            println!("{}", serde_json::to_string(&report).map_err(|e| rt(e.into()))?);
        }
        Command::Retrieve {
            checkpoint,
            corpus,
            query_features,
            gallery_features,
            modality,
            k,
            ..
        } => {
            let m = match modality {
                ModalityArg::Appearance => Modality::Appearance,
                ModalityArg::Motion => Modality::Motion,
            };
            let (q, g) = match (query_features, gallery_features, checkpoint) {
                (Some(q), Some(g), _) => {
                    let keep = |v: Vec<crate::datagen::FeatureFileRecord>| v.into_iter().filter(|r| r.modality == m).collect::<Vec<_>>();
                    (keep(load_feature_file(q).map_err(rt)?), keep(load_feature_file(g).map_err(rt)?))
                }
                (_, _, Some(ck)) => {
                    let ck = load_checkpoint(ck).map_err(rt)?;
                    let corpus = corpus_from(&cfg, corpus.as_deref()).map_err(rt)?;
                    (
                        feature_records(&ck.state.model, &corpus.domain_clips(Domain::Target), m).map_err(rt)?,
                        feature_records(&ck.state.model, &corpus.domain_clips(Domain::Source), m).map_err(rt)?,
                    )
                }
                _ => {
                    return Err((
                        2,
                        Error::Config("retrieve needs --checkpoint or --query-features/--gallery-features".into()),
                    ))
                }
            };
            let result = retrieve(&q, &g, *k).map_err(rt)?;
            write_json(&out.join("retrieval.json"), &result).map_err(rt)?;
            println!("precision_at_1={}", result.precision_at_1);
        }
        Command::DumpEmbeddings { input, space, .. } => {
            let ck = load_checkpoint(&input.checkpoint).map_err(rt)?;
            let corpus = corpus_from(&cfg, input.corpus.as_deref()).map_err(rt)?;
            let spaces: &[EmbeddingSpace] = match space {
                SpaceArg::Pre => &[EmbeddingSpace::Pre],
                SpaceArg::Post => &[EmbeddingSpace::Post],
                SpaceArg::Both => &[EmbeddingSpace::Pre, EmbeddingSpace::Post],
            };
            for p in dump_embeddings(&ck.state.model, &corpus.clips, spaces, out).map_err(rt)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { self_training_noise, .. } => {
            write_table(out, "ablation", &run_ablation(&cfg).map_err(rt)?).map_err(rt)?;
            if let Some(noise) = self_training_noise {
                if !(0.0..=1.0).contains(noise) {
                    return Err((2, Error::Config("--self-training-noise must lie in [0, 1]".into())));
                }
                let table = run_self_training_comparison(&cfg, *noise).map_err(rt)?;
                write_table(out, "self_training", &table).map_err(rt)?;
            }
        }
        Command::Sensitivity { .. } => {
            write_table(out, "sensitivity", &run_sensitivity(&cfg).map_err(rt)?).map_err(rt)?;
        }
    }
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    corpus_dir: Option<&Path>,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<()> {
    let corpus = corpus_from(cfg, corpus_dir)?;
    let source = corpus.domain_clips(Domain::Source);
    let target = corpus.domain_clips(Domain::Target);
    let data = TrainingData::new(&source, &target, corpus.spec.num_classes, corpus.spec.frame_size, &cfg.trainer)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?.state,
        None => TrainState::new(&cfg.model, &cfg.trainer, &data)?,
    };
    let evaluator = |model: &crate::encoder::TwoStreamModel, step: u64| {
        let r = eval_report(model, &source, &target, step)?;
        log::info!("step {step}: target top-1 {:.3}, source top-1 {:.3}", r.top1_target, r.top1_source);
        Ok(r)
    };
    let mut history = TrainingHistory::default();
    let stop = stop_at.unwrap_or(cfg.trainer.total_steps);
    train_until(&mut state, &data, &cfg.trainer, Some(&evaluator), &mut history, stop)?;
    history.write_loss_log(&out.join("loss_log.csv"))?;
    write_json(&out.join("eval_reports.json"), &history.evals)?;
    write_json(&out.join("pseudo_label_stats.json"), &history.pseudo)?;
    save_checkpoint(&out.join("checkpoint.bin"), &state, &cfg.model, &cfg.trainer)?;
    if let Some(last) = history.evals.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Malformed { .. } | Error::Json(_) | Error::Csv(_) => "parse",
        Error::DimensionMismatch { .. } | Error::Shape(_) | Error::WindowMismatch { .. } => "shape",
        Error::NonFinite { .. } => "numeric",
        Error::Checkpoint(_) => "checkpoint",
        _ => "runtime",
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err((code, e)) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{line}");
            code
        }
    }
}

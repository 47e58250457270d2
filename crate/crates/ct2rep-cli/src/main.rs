//! `ct2rep`: synthesize datasets, train the base or longitudinal model,
//! generate findings reports, evaluate them, and inspect checkpoints.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ct2rep_core::checkpoint::Checkpoint;
use ct2rep_core::runner::{run_eval as eval_reports_files, run_generate, run_train, TrainOptions};
use ct2rep_core::synth::{synth_dataset, SynthConfig};
use ct2rep_core::{LabelerRules, ModelKind, RunConfig};

#[derive(Parser)]
#[command(name = "ct2rep", about = "Report generation for 3D chest CT volumes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Mode {
    Base,
    Long,
}

impl From<Mode> for ModelKind {
    fn from(m: Mode) -> ModelKind {
        match m {
            Mode::Base => ModelKind::Base,
            Mode::Long => ModelKind::Longitudinal,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults are the desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (volumes, findings, pair manifests).
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for payloads and manifests.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patients: usize,
        #[arg(long, default_value_t = 1)]
        min_visits: usize,
        #[arg(long, default_value_t = 3)]
        max_visits: usize,
        /// Probability a finding persists to the next visit.
        #[arg(long, default_value_t = 0.8)]
        persistence: f64,
        /// Probability a new finding appears at the next visit.
        #[arg(long, default_value_t = 0.08)]
        onset: f64,
        /// Mean abnormality count at the first visit.
        #[arg(long, default_value_t = 2.0)]
        initial_rate: f64,
        /// Fraction of patients in the train split.
        #[arg(long, default_value_t = 0.94)]
        train_fraction: f64,
    },
    /// Train a model on a manifest (volume rows for base, pairs for long).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Base)]
        mode: Mode,
        /// Output directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override config epochs.
        #[arg(long)]
        epochs: Option<u64>,
        /// Override config max optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Ablation: run the longitudinal model with its prior pathway cut.
        #[arg(long, default_value_t = false)]
        zero_priors: bool,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Decode one report per manifest entry into a JSON-lines file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must match the checkpoint's model kind when given.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Score predictions against references (NLG + clinical efficacy).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Reference reports: a reports file or a manifest with findings.
        #[arg(long)]
        truth: PathBuf,
        /// Metrics JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the bundled labeler rules.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Print a checkpoint's header and verify its byte round trip.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth {
            config,
            out,
            patients,
            min_visits,
            max_visits,
            persistence,
            onset,
            initial_rate,
            train_fraction,
        } => {
            let cfg = config.load()?;
            let scfg = SynthConfig {
                n_patients: patients,
                min_visits,
                max_visits,
                persistence,
                onset,
                initial_rate,
                volume_shape: cfg.model.volume_shape,
                spacing: cfg.model.target_spacing,
                train_fraction,
            };
            let paths = synth_dataset(&scfg, cfg.seed, &out)?;
            println!("wrote {}", paths.train_manifest.display());
            println!("wrote {}", paths.val_manifest.display());
            println!("wrote {}", paths.train_pairs.display());
            println!("wrote {}", paths.val_pairs.display());
        }
        Command::Train {
            config,
            manifest,
            mode,
            out,
            resume,
            epochs,
            max_steps,
            zero_priors,
            quiet,
        } => {
            let mut cfg = config.load()?;
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            if let Some(s) = max_steps {
                cfg.optim.max_steps = Some(s);
            }
            let report = run_train(
                &cfg,
                &manifest,
                &TrainOptions {
                    mode: mode.into(),
                    out_dir: out,
                    resume,
                    zero_priors,
                    quiet,
                },
            )?;
            println!(
                "trained {} steps, final loss {:.6}",
                report.steps, report.final_loss
            );
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("loss log: {}", report.loss_log_path.display());
        }
        Command::Generate {
            checkpoint,
            manifest,
            out,
            mode,
        } => {
            let rows = run_generate(&checkpoint, &manifest, &out, mode.map(Into::into))?;
            println!("wrote {} reports to {}", rows.len(), out.display());
        }
        Command::Eval {
            pred,
            truth,
            out,
            rules,
        } => {
            let rules = match rules {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading rules {}", path.display()))?;
                    LabelerRules::from_json(&text)?
                }
                None => LabelerRules::default_rules(),
            };
            let report = eval_reports_files(&pred, &truth, &rules)?;
            println!("pairs evaluated: {}", report.pairs);
            println!("--- NLG metrics (corpus level; sentence means in JSON) ---");
            println!(
                "BL-1 {:.4}  BL-2 {:.4}  BL-3 {:.4}  BL-4 {:.4}  M-lite {:.4}  R_L {:.4}",
                report.corpus.bleu1,
                report.corpus.bleu2,
                report.corpus.bleu3,
                report.corpus.bleu4,
                report.corpus.meteor_lite,
                report.corpus.rouge_l
            );
            println!("--- CE metrics (18 abnormalities) ---");
            println!("{:<38} {:>7} {:>7} {:>7}", "Abnormality", "P", "R", "F1");
            for row in &report.ce.per_label {
                println!(
                    "{:<38} {:>7.3} {:>7.3} {:>7.3}",
                    row.label, row.precision, row.recall, row.f1
                );
            }
            println!(
                "{:<38} {:>7.3} {:>7.3} {:>7.3}",
                "Mean",
                report.ce.mean_precision,
                report.ce.mean_recall,
                report.ce.mean_f1
            );
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", out.display()))?;
                println!("metrics JSON: {}", out.display());
            }
        }
        Command::InspectCheckpoint { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let original = fs::read(&checkpoint)?;
            let resaved = ck.to_bytes();
            println!("kind: {}", ck.kind);
            println!("step: {}", ck.step);
            println!("vocab size: {}", ck.vocab.len());
            println!("config: {}", ck.config.to_json());
            let total: usize = ck.params.iter().map(|p| p.data.len()).sum();
            println!("params: {} tensors, {} values", ck.params.len(), total);
            for p in &ck.params {
                println!("  {:<28} {:?}", p.name, p.shape);
            }
            if resaved == original {
                println!("round trip: byte-identical");
            } else {
                bail!("round trip mismatch: re-encoded bytes differ from file");
            }
        }
    }
    Ok(())
}

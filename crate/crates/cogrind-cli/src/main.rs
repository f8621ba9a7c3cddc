//! `cogrind` — generate, train, infer, stabilize, and evaluate as
//! reproducible runs. Every subcommand stamps a run manifest (resolved
//! config, seed, inputs, outputs, wall clock) next to its outputs, and
//! all randomness flows from `--seed`.

mod commands;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cogrind::model::Mode;

#[derive(Parser)]
#[command(name = "cogrind", version, about = "Synthetic-video referring-expression grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset with expression annotations.
    Gen {
        /// Key=value settings file; built-in defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed for scene sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grounding model on a generated dataset.
    Train {
        /// Dataset directory produced by `gen`.
        data: PathBuf,
        /// Key=value settings file; built-in defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation mode override: baseline, s-att, sl-att, cg-baseline,
        /// cg-s-att, or cg-sl-att.
        #[arg(long)]
        mode: Option<Mode>,
        /// Seed for parameter init and batch sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run directory for model.ckpt, model.json, and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over a dataset, writing top-K predictions.
    Infer {
        /// Run directory holding model.ckpt and model.json.
        model: PathBuf,
        /// Dataset directory to ground.
        data: PathBuf,
        /// Ablation mode override; checkpoints carry parameters for every
        /// mode, so any checkpoint runs in any mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Candidates kept per frame.
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Also write raw attention maps next to the predictions.
        #[arg(long)]
        dump_maps: bool,
        /// Predictions file to write (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-rank predictions with temporal window stabilization.
    Stabilize {
        /// Predictions file from `infer`.
        predictions: PathBuf,
        /// Candidates considered per frame (at most the file's own K).
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Temporal window size; must be odd.
        #[arg(long, default_value_t = 5)]
        window: usize,
        /// Stabilized predictions file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files against dataset annotations; several files
    /// print as one comparison block.
    Eval {
        /// Prediction files to score.
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        /// Dataset directory providing ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Frame subset: all, occluded, or an ambiguity class
        /// (unique_attribute, location_only, distractor, occlusion).
        #[arg(long, default_value = "all")]
        subset: String,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `COGRIND_THREADS` caps worker parallelism for generation, inference,
/// and evaluation. Output content never depends on the thread count.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("COGRIND_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("COGRIND_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("COGRIND_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    configure_threads()?;
    match Cli::parse().command {
        Command::Gen { config, seed, out } => commands::cmd_gen(config.as_deref(), seed, &out),
        Command::Train { data, config, mode, seed, out } => {
            commands::cmd_train(&data, config.as_deref(), mode, seed, &out)
        }
        Command::Infer { model, data, mode, topk, dump_maps, out } => {
            commands::cmd_infer(&model, &data, mode, topk, dump_maps, &out)
        }
        Command::Stabilize { predictions, topk, window, out } => {
            commands::cmd_stabilize(&predictions, topk, window, &out)
        }
        Command::Eval { predictions, data, subset, out } => {
            commands::cmd_eval(&predictions, &data, &subset, out.as_deref())
        }
    }
}

//! `eegda` — featurize raw recordings, train the domain-adaptive classifier,
//! run gated test-time augmentation, and evaluate or ablate the result.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eegda_core::{CoreError, ErrorClass};

#[derive(Parser)]
#[command(name = "eegda", version, about = "Cross-dataset EEG classification with domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration with flat dotted keys (loss.alpha, tta.tau, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw multi-channel records into a band-power feature file.
    Featurize {
        #[command(flatten)]
        common: CommonArgs,
        /// Raw record container (RECS format).
        #[arg(long)]
        input: PathBuf,
        /// Output prefix; writes PREFIX.feat, PREFIX.segs, PREFIX.norm.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated band subset (delta,theta,alpha,beta,gamma).
        #[arg(long)]
        bands: Option<String>,
        /// Normalize with a previously fitted transform instead of refitting.
        #[arg(long)]
        norm_from: Option<PathBuf>,
        /// Skip writing the raw segment store.
        #[arg(long)]
        no_segments: bool,
        /// Mark the output as a target-domain set.
        #[arg(long)]
        target: bool,
    },
    /// Generate the synthetic domain-shift benchmark.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: pre-train, cluster, adapt, infer, evaluate.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Held-out target labels for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Inference mode: pc_tta, full_tta, or no_tta.
        #[arg(long, default_value = "pc_tta")]
        mode: String,
    },
    /// Pre-training stage only; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster computation and adaptation, resuming from a checkpoint.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inference from a checkpoint.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pc_tta")]
        mode: String,
    },
    /// Component ablations: pretrain-only, one-shot selection, no TTA, full.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against held-out truth labels.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Data => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Featurize {
            common,
            input,
            out,
            bands,
            norm_from,
            no_segments,
            target,
        } => commands::featurize(&common, &input, &out, bands.as_deref(), norm_from.as_deref(), no_segments, target),
        Command::Synth { common, out } => commands::synth(&common, &out),
        Command::Run {
            common,
            source,
            target,
            truth,
            out,
            mode,
        } => commands::run(&common, &source, &target, truth.as_deref(), &out, &mode),
        Command::Pretrain { common, source, out } => commands::pretrain(&common, &source, &out),
        Command::Adapt {
            common,
            source,
            target,
            checkpoint,
            out,
        } => commands::adapt(&common, &source, &target, &checkpoint, &out),
        Command::Infer {
            common,
            target,
            checkpoint,
            truth,
            out,
            mode,
        } => commands::infer(&common, &target, &checkpoint, truth.as_deref(), &out, &mode),
        Command::Ablate {
            common,
            source,
            target,
            truth,
            out,
        } => commands::ablate(&common, &source, &target, &truth, &out),
        Command::Eval { common, pred, truth, out } => {
            commands::eval(&common, &pred, &truth, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lrsl::commands::{cmd_analyze, cmd_decompose, cmd_merge, cmd_train, AnalyzeKind};
use lrsl_core::adapters::SplitMode;

/// Low-rank adaptation experiments on a small decoder-only transformer.
#[derive(Parser)]
#[command(name = "lrsl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split every non-norm weight of a checkpoint into a frozen part plus
    /// low-rank factors over a chosen band of singular components.
    Decompose {
        /// Checkpoint to decompose.
        #[arg(long)]
        input: PathBuf,
        /// Number of singular components to move into the factors.
        #[arg(long)]
        rank: usize,
        /// Which components to select: principal, minor, or random.
        #[arg(long)]
        mode: SplitMode,
        /// Seed for the random mode's component draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the per-weight split files and summary.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a full experiment from a JSON config: pretrain, finetune each
    /// scheme, and write metrics, checkpoints, and analyses.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare a finetuned checkpoint against its base.
    Analyze {
        /// Base (pretrained) checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Finetuned checkpoint.
        #[arg(long)]
        finetuned: PathBuf,
        /// Subspace dimension for the comparison.
        #[arg(long)]
        rank: usize,
        /// Which analysis: similarity, projection, or forgetting.
        #[arg(long)]
        kind: AnalyzeKind,
        /// Task spec (JSON) describing the corpus; required for forgetting.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Directory for the CSV output.
        #[arg(long)]
        output: PathBuf,
    },
    /// Fold an adapter-only checkpoint into a base checkpoint, checking the
    /// dense result against the adapted forward pass on probe inputs.
    Merge {
        /// Base (pretrained) checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Adapter-only checkpoint to fold in.
        #[arg(long)]
        adapters: PathBuf,
        /// Path for the merged dense checkpoint.
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose { input, rank, mode, seed, output } => {
            cmd_decompose(&input, rank, mode, seed, &output)
        }
        Command::Train { config } => cmd_train(&config),
        Command::Analyze { base, finetuned, rank, kind, corpus, output } => {
            cmd_analyze(&base, &finetuned, rank, kind, corpus.as_deref(), &output)
        }
        Command::Merge { base, adapters, output } => cmd_merge(&base, &adapters, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

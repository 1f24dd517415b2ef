mod commands;
mod error;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clap::error::ErrorKind;
use plexus_core::config::RunConfig;

use crate::error::CliError;

/// Concept-guided plexus tile classification pipeline.
#[derive(Parser)]
#[command(name = "plexus", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct DataArgs {
    /// Bag embeddings (KDVE).
    #[arg(long)]
    pub bags: PathBuf,
    /// Prompt text file (class, level, text per line).
    #[arg(long)]
    pub prompts: PathBuf,
    /// Prompt embeddings (KDVE, ids equal to prompt text).
    #[arg(long)]
    pub concepts: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a synthetic dataset: bags, concepts, prompts and optional slide images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Render this many slide/mask PNG pairs.
        #[arg(long, default_value_t = 0)]
        images: usize,
    },
    /// Fit or apply stain profiles.
    #[command(subcommand)]
    Normalize(NormalizeOp),
    /// Build a tile index (JSON lines) from plexus masks.
    Tile {
        /// Mask PNG; the slide id is the file stem without a `_mask` suffix. Repeatable.
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        /// Masks are at scan resolution; downsample by the configured factor first.
        #[arg(long)]
        full_resolution: bool,
        /// Keep a balanced per-slide sample instead of every tile.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the head on one fold's training slides, selecting on its validation slides.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a bag file.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run slide-grouped k-fold cross-validation.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a `cv` or `eval` report.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Recompute the published metric table from its confusion matrices.
    VerifyMetrics,
    /// Print the effective configuration.
    Config,
}

#[derive(Subcommand)]
pub enum NormalizeOp {
    /// Estimate an image's stain profile.
    Fit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map an image onto a reference profile (default: the bundled one).
    Apply {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    Ok(RunConfig::load(text.as_deref(), &cli.set)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out, images } => commands::synth(&cfg, &out, images),
        Command::Normalize(op) => commands::normalize(&cfg, op),
        Command::Tile {
            mask,
            full_resolution,
            sample,
            out,
        } => commands::tile(&cfg, &mask, full_resolution, sample, &out),
        Command::Train { data, fold, out } => commands::train(&cfg, &data, fold, &out),
        Command::Eval { data, checkpoint, out } => commands::eval(&cfg, &data, &checkpoint, &out),
        Command::Cv { data, out } => commands::cv(&cfg, &data, &out),
        Command::Report { input, format } => commands::report(&input, format),
        Command::VerifyMetrics => commands::verify_metrics(),
        Command::Config => {
            print!("{}", cfg.canonical());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

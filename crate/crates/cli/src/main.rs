use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use milpath_cli::commands::{self, EmbedArgs, EnsembleArgs, EvalArgs, GenDataArgs, SweepArgs};
use milpath_cli::config::RunConfig;
use milpath_core::ensemble::EnsembleMode;
use milpath_core::eval::SweepKind;
use milpath_core::slide::{DatasetSpec, Magnification, Split};

#[derive(Parser)]
#[command(name = "milpath", version, about = "Weakly supervised slide classification with top-1 MIL")]
struct Cli {
    /// Inference threads; results do not depend on it.
    #[arg(long, global = true, env = "MILPATH_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide corpus and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        slides: usize,
        #[arg(long, default_value_t = 0.199)]
        prevalence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 0.05)]
        lesion_fraction: f64,
        #[arg(long, default_value_t = 32)]
        tile_size: usize,
        #[arg(long, default_value_t = 3)]
        blobs: usize,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score one split with a checkpoint and write metrics and ROC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Repeat training over one varied setting.
    Sweep {
        #[arg(long)]
        kind: SweepKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Combine exported slide scores across magnifications.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, default_value = "max")]
        mode: EnsembleMode,
        /// Comma-separated subset, e.g. 20x,5x. Defaults to all present.
        #[arg(long, value_delimiter = ',')]
        magnifications: Option<Vec<Magnification>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Project tile embeddings to 2-D.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = milpath_core::embed::TILES_PER_SLIDE)]
        per_slide: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    let workers = cli.workers.unwrap_or(1);
    match cli.command {
        Command::GenData { out: dir, slides, prevalence, seed, side, lesion_fraction, tile_size, blobs, force } => {
            let spec = DatasetSpec {
                slides,
                prevalence,
                seed,
                side,
                tile_size,
                tissue_blob_count: blobs,
                lesion_fraction,
            };
            commands::gen_data(&GenDataArgs { out: dir, spec, force, workers }, &mut out)
        }
        Command::Train { config, seed } => {
            let cfg = commands::with_overrides(RunConfig::load(&config)?, cli.workers, seed);
            commands::train(&cfg, &mut out)
        }
        Command::Eval { checkpoint, manifest, split, out: dir, threshold } => commands::eval(
            &EvalArgs { checkpoint, manifest, split, out: dir, threshold, workers },
            &mut out,
        ),
        Command::Sweep { kind, config, seed } => {
            let cfg = commands::with_overrides(RunConfig::load(&config)?, cli.workers, seed);
            commands::sweep(&SweepArgs { kind, config: cfg }, &mut out)
        }
        Command::Ensemble { scores, mode, magnifications, out: dir, threshold } => commands::ensemble(
            &EnsembleArgs { scores, mode, magnifications, out: dir, threshold },
            &mut out,
        ),
        Command::Embed { checkpoint, manifest, split, out: dir, per_slide, seed } => commands::embed(
            &EmbedArgs { checkpoint, manifest, split, out: dir, per_slide, seed, workers },
            &mut out,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(milpath_cli::exit_code(&e) as u8)
        }
    }
}

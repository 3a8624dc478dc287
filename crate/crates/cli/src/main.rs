//! `clim`: dataset generation, training, evaluation and inspection.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running (I/O, corrupt files, non-finite losses).

mod commands;
mod paths;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "clim",
    version,
    about = "Region-text alignment from mosaicked image-text pairs"
)]
struct Cli {
    /// Root directory for run and dataset outputs [default: `paths.runs` of
    /// the configuration file, else ./runs].
    #[arg(long, global = true, env = "CLIM_RUN_ROOT")]
    run_root: Option<PathBuf>,

    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

/// Run configuration: an optional TOML file plus `key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set optim.lr=1e-3` or
    /// `--set 'grid={ fixed = 2 }'`. Applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Source image for the dense-map commands.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ImageSource {
    /// PNG image; resized to the model's canvas when needed.
    #[arg(long)]
    pub image: Option<PathBuf>,

    /// Index into the evaluation split, rendered on the model's canvas.
    #[arg(long)]
    pub sample: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into a cache directory.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Cache directory (default: `paths.data`, else `<run-root>/data-<hash>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a cache generated from a different configuration.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes config, metrics and checkpoints to a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset cache (default: `paths.data`, else regenerated in memory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total number of optimizer steps (overrides `steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue the run in this directory from its checkpoint.
        #[arg(long, value_name = "RUN_DIR", conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Run directory (default: `<run-root>/<config-hash>-<timestamp>`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overwrite a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Zero-shot region classification and mosaic localization of a checkpoint.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache (default: regenerated from the checkpoint's configuration).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate on the first N evaluation images only.
        #[arg(long)]
        limit: Option<usize>,
        /// Held-out 2x2 mosaics for the localization score (0 skips it).
        #[arg(long, default_value_t = 100)]
        mosaics: usize,
        /// Output JSON (default: `eval-<step>.json` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Response map of the dense features to one text.
    Heatmap {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: ImageSource,
        /// Query text, e.g. "a red circle".
        #[arg(long)]
        text: String,
        /// Side of the best-box window, in feature cells.
        #[arg(long, default_value_t = 2)]
        window: usize,
        /// Dataset cache (default: regenerated from the checkpoint's configuration).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-cell classification of the dense features against prompts.
    PerPixel {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: ImageSource,
        /// Prompt text (repeatable); default: the 40 class prompts.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        /// Dataset cache (default: regenerated from the checkpoint's configuration).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build one mosaic and write it with its region geometry.
    InspectMosaic {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed for source selection, crops and composed regions.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid side; default: drawn from the grid policy.
        #[arg(long)]
        grid: Option<usize>,
        /// Dataset cache (default: `paths.data`, else regenerated in memory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: a fresh `<config-hash>-<timestamp>` directory under the run root).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Parse and validate a configuration; prints the resolved TOML.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Check a boxes JSON written by inspect-mosaic (tiling and composed regions).
    ValidateBoxes {
        /// `mosaic-seed<k>.json` from inspect-mosaic.
        file: PathBuf,
    },
}

fn run(cli: Cli) -> clim::Result<()> {
    let root = cli.run_root.as_deref();
    match cli.command {
        Command::GenerateData { config, out, force } => commands::generate_data(root, &config, out, force),
        Command::Train {
            config,
            data,
            steps,
            resume,
            run_dir,
            force,
        } => commands::train(root, &config, data, steps, resume, run_dir, force),
        Command::Eval {
            checkpoint,
            data,
            limit,
            mosaics,
            out,
        } => commands::eval(&checkpoint, data, limit, mosaics, out),
        Command::Heatmap {
            checkpoint,
            source,
            text,
            window,
            data,
            out_dir,
        } => commands::heatmap(&checkpoint, &source, &text, window, data, out_dir),
        Command::PerPixel {
            checkpoint,
            source,
            prompts,
            data,
            out_dir,
        } => commands::per_pixel(&checkpoint, &source, &prompts, data, out_dir),
        Command::InspectMosaic {
            config,
            seed,
            grid,
            data,
            out_dir,
        } => commands::inspect_mosaic(root, &config, seed, grid, data, out_dir),
        Command::ValidateConfig { config } => commands::validate_config(&config),
        Command::ValidateBoxes { file } => commands::validate_boxes(&file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

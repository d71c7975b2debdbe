use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use trackaug_cli::{
    cmd_augment, cmd_bench, cmd_preview, cmd_stats, parse_epochs, AugmentOptions, BenchOptions,
    PreviewOptions, StatsMode, StatsOptions, UsageError,
};

#[derive(Parser)]
#[command(name = "trackaug", version, about = "Deterministic tracking-pair augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write augmented template/search patches and a manifest.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `N` for epochs 0..N, or `A..B`.
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render a grid of samples with boxes and crop kinds.
    Preview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Crop, sweep or mixing statistics.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: StatsMode,
        #[arg(long, default_value_t = 100_000)]
        n: u64,
        #[arg(long, default_value = "stats")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Throughput of cropping, full pairs and token mixing.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Seconds per measurement.
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        /// Fixed operation count instead of a time budget.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Augment { config, out, seed, epochs, workers } => {
            let epochs = epochs.as_deref().map(parse_epochs).transpose()?;
            let s = cmd_augment(&AugmentOptions { config, out, seed, epochs, workers })?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Preview { config, n, out, seed, epoch } => {
            let layout = cmd_preview(&PreviewOptions { config, n, out: out.clone(), seed, epoch })?;
            println!("wrote {} ({}x{} tiles)", out.display(), layout.rows, layout.cols);
        }
        Command::Stats { config, mode, n, out, seed, workers } => {
            print!("{}", cmd_stats(&StatsOptions { config, mode, n, out, seed, workers })?);
        }
        Command::Bench { config, duration, n, workers, seed } => {
            if !(duration.is_finite() && duration > 0.0) {
                return Err(UsageError("--duration must be > 0".into()).into());
            }
            let opts = BenchOptions {
                config,
                duration: Duration::from_secs_f64(duration),
                n,
                workers,
                seed,
            };
            println!("{}", serde_json::to_string_pretty(&cmd_bench(&opts)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

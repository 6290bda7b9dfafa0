mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iqfm::config::TaskKind;
use iqfm::net::Preset;
use iqfm::tasks::{BackboneMode, SeparationTarget};

#[derive(Debug, Parser)]
#[command(name = "iqfm", version, about = "Masked-autoencoder pretraining and downstream tasks for IQ signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, env = "IQFM_RUN_DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Producer threads for the prefetch pipeline.
    #[arg(long)]
    workers: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Four modulations plus two radar waveforms, for pretraining.
    Toy,
    Modulation,
    Radar,
    Mixture,
    Device,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus as EMR1 files.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        /// Records per class (mixtures in total, or records per device).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        snr_db: Option<f64>,
        /// Sources per mixture (1 gives a denoising set).
        #[arg(long)]
        sources: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pack corpora greedily and report utilization against pad-to-max.
    PackStats {
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        capacity: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Masked-autoencoder pretraining over weighted corpora.
    Pretrain {
        #[arg(long = "corpus")]
        corpora: Vec<PathBuf>,
        #[arg(long = "weight")]
        weights: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        capacity: Option<usize>,
        /// Packs per update.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from this checkpoint's parameters.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a task head with the backbone fine-tuned, frozen or from scratch.
    Finetune {
        #[arg(long)]
        task: Option<TaskKind>,
        #[command(flatten)]
        task_args: TaskArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Linear probe on frozen backbone features.
    Probe {
        #[command(flatten)]
        task_args: TaskArgs,
        /// Probe a randomly initialized backbone instead of `--init`.
        #[arg(long)]
        random_init: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Select k records per class (and SNR) and optionally train on them.
    Fewshot {
        #[arg(long)]
        k: Option<usize>,
        /// Stratify by SNR as well as class.
        #[arg(long)]
        by_snr: bool,
        #[command(flatten)]
        task_args: TaskArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Source separation (or denoising with one source) on mixtures.
    Separate {
        #[command(flatten)]
        task_args: TaskArgs,
        #[arg(long)]
        from_scratch: bool,
        /// Keep the pretrained backbone fixed.
        #[arg(long)]
        frozen: bool,
        #[arg(long)]
        target: Option<Target>,
        #[arg(long)]
        lambda_z: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Held-out reconstruction loss of a pretrained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Sources,
    Mixture,
}

impl From<Target> for SeparationTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::Sources => SeparationTarget::Sources,
            Target::Mixture => SeparationTarget::Mixture,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct TaskArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Pretrained checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<BackboneMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

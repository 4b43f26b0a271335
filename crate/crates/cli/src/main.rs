//! `ssreg`: toy corpus generation, training, evaluation and ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::Precision;

#[derive(Parser, Debug)]
#[command(name = "ssreg", version, about = "Self-supervised speaker embedding toolkit")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// A config file plus dotted-key overrides.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set train.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a toy corpus with noise and RIR banks, trials and a config.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 4.5)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        noises: usize,
        #[arg(long, default_value_t = 12)]
        rirs: usize,
    },
    /// Train from a config, writing checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trial list with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterances referenced by the trials.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Directory for report.txt, scores.txt and det.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_target: f64,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
        precision: PrecisionArg,
    },
    /// Train and evaluate once per strategy or per λ, then tabulate.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated augmentation strategies (1-6).
        #[arg(long, value_delimiter = ',', conflicts_with = "lambdas", required_unless_present = "lambdas")]
        strategies: Option<Vec<u8>>,
        /// Comma-separated regularization weights.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Seeds to repeat every row with.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Write normalized log-mel features of a WAV file.
    DumpFeatures {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write CSV (one frame per row) instead of the binary dump.
        #[arg(long)]
        csv: bool,
        /// Skip mean/variance normalization.
        #[arg(long)]
        raw: bool,
    },
    /// Write the augmented segment pair for one utterance plus its op log.
    AugmentPreview {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        utterance: String,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Verbosity comes from the command line only; runs are not configured
    // through the environment.
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy {
            out,
            speakers,
            utts,
            duration,
            seed,
            trials,
            noises,
            rirs,
        } => commands::make_toy(&commands::ToyArgs {
            out,
            speakers,
            utts,
            duration,
            seed,
            trials,
            noises,
            rirs,
        }),
        Command::Train { config, resume } => {
            let cfg = config::RunConfig::load(&config.config, &config.overrides)?;
            commands::train(&cfg, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            manifest,
            trials,
            out,
            p_target,
            precision,
        } => commands::eval(&commands::EvalArgs {
            checkpoint,
            manifest,
            trials,
            out,
            p_target,
            precision: precision.into(),
        }),
        Command::Ablate {
            config,
            strategies,
            lambdas,
            seeds,
        } => {
            let cfg = config::RunConfig::load(&config.config, &config.overrides)?;
            let sweep = match (strategies, lambdas) {
                (Some(s), _) => commands::Sweep::Strategies(s),
                (None, Some(l)) => commands::Sweep::Lambdas(l),
                (None, None) => unreachable!("clap requires one sweep"),
            };
            commands::ablate(&cfg, &sweep, &seeds)
        }
        Command::DumpFeatures { wav, out, csv, raw } => commands::dump_features(&wav, &out, csv, raw),
        Command::AugmentPreview {
            config,
            utterance,
            step,
            out,
        } => {
            let cfg = config::RunConfig::load(&config.config, &config.overrides)?;
            commands::augment_preview(&cfg, &utterance, step, &out)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;

use commands::{DenoiseMode, EvalArgs, Exit, SampleArgs, ScoreMode, TrainArgs};

/// Few-step generative modeling with normalizing trajectory models.
///
/// Exit codes: 0 ok, 1 property failure or runtime error, 2 config error,
/// 3 missing artifact, 4 invalid request, 5 missing optional component.
#[derive(Parser)]
#[command(name = "trajflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow-matching backbone.
    PretrainFm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a trajectory model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initialize a trajectory model from a backbone and train it with the
    /// mean-alignment loss.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Backbone checkpoint file or pretrain-fm run directory.
        #[arg(long)]
        fm_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate samples.
    Sample {
        /// Model checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Guidance weight; 0 disables guidance.
        #[arg(long, default_value_t = 0.0)]
        cfg_w: f64,
        #[arg(long, value_enum, default_value_t = DenoiseMode::None)]
        denoise: DenoiseMode,
        /// Distilled denoiser checkpoint or run directory, for `--denoise learned`.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScoreMode::Joint)]
        score_mode: ScoreMode,
        /// Gradient clipping percentile for score denoising; 0 disables.
        #[arg(long, default_value_t = 99.0)]
        clip_percentile: f64,
        /// Fixed class label; classes rotate when omitted.
        #[arg(long)]
        class: Option<usize>,
        /// Also write the decoded trajectory.
        #[arg(long)]
        trajectory: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a one-pass denoiser from trajectory score denoising.
    DistillDenoiser {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run property suites and report measured values against thresholds.
    Verify {
        /// schedule | flow | gradients | oracle | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Energy distance, held-out NLL and sampling cost per step count.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset name, or a config file with a `[data]` section.
        #[arg(long)]
        dataset: String,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    commands::init_threads()?;
    match cli.command {
        Command::PretrainFm { config, out, seed } => commands::pretrain_fm(TrainArgs {
            config: &config,
            out: &out,
            seed,
        }),
        Command::Train { config, out, seed } => commands::train(TrainArgs {
            config: &config,
            out: &out,
            seed,
        }),
        Command::Finetune {
            config,
            fm_checkpoint,
            out,
            seed,
        } => commands::finetune(
            TrainArgs {
                config: &config,
                out: &out,
                seed,
            },
            &fm_checkpoint,
        ),
        Command::Sample {
            checkpoint,
            n,
            steps,
            cfg_w,
            denoise,
            denoiser,
            score_mode,
            clip_percentile,
            class,
            trajectory,
            seed,
            out,
        } => commands::sample_cmd(SampleArgs {
            checkpoint: &checkpoint,
            n,
            steps,
            cfg_w,
            denoise,
            denoiser: denoiser.as_deref(),
            score_mode,
            clip_percentile,
            class,
            trajectory,
            seed,
            out: &out,
        }),
        Command::DistillDenoiser {
            checkpoint,
            config,
            out,
            seed,
        } => commands::distill_denoiser(
            TrainArgs {
                config: &config,
                out: &out,
                seed,
            },
            &checkpoint,
        ),
        Command::Verify { suite, seed } => commands::verify_cmd(&suite, seed),
        Command::Eval {
            checkpoint,
            dataset,
            steps,
            n,
            seed,
            out,
        } => commands::eval_cmd(EvalArgs {
            checkpoint: &checkpoint,
            dataset: &dataset,
            steps: &steps,
            n,
            seed,
            out: &out,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<trajflow::Error>() {
        Some(trajflow::Error::Config { .. } | trajflow::Error::MissingKey(_)) => commands::EXIT_CONFIG,
        Some(trajflow::Error::Checkpoint(_)) => commands::EXIT_MISSING,
        Some(e) if e.is_invalid_argument() => commands::EXIT_REQUEST,
        _ => commands::EXIT_PROPERTY,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

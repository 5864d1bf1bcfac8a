mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use airid::losses::Variant;
use airid::training::SweepParam;
use clap::{Args, Parser, Subcommand};

use crate::commands::TrainPaths;
use crate::config::TrainOverrides;
use crate::error::{CliResult, Kind};

/// Adversarial attribute-to-image retrieval on synthetic pedestrians.
#[derive(Debug, Parser)]
#[command(name = "airid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON training config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `airid synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

impl TrainArgs {
    fn paths(&self) -> TrainPaths<'_> {
        TrainPaths {
            config: self.config.as_deref(),
            data: &self.data,
            out: &self.out,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the image branch on semantic ids.
    Pretrain(TrainArgs),
    /// Joint training; pretrains first unless a pretrained checkpoint is available.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Pretrained checkpoint (default: `<out>/pretrained.airc` if present).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Continue a checkpoint written by `pretrain`, `train` or a periodic save.
        #[arg(long, conflicts_with = "pretrained")]
        resume: Option<PathBuf>,
    },
    /// Rank the test gallery for every query and score CMC and mAP.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate (default: `<out>/model.airc`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-query rankings.
        #[arg(long)]
        rankings: bool,
    },
    /// One joint run and evaluation per value of lambda_G or lambda_D.
    Sweep {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Train and evaluate every loss variant from one shared pretrained model.
    Ablate {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
        variants: Vec<Variant>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Comparison table and SVG plots over finished runs.
    Report {
        /// Run directories (eval, train, ablate or sweep outputs).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), &out, seed),
        Command::Pretrain(a) => commands::pretrain(&a.paths(), &a.overrides),
        Command::Train {
            args,
            pretrained,
            resume,
        } => commands::train(
            &args.paths(),
            &args.overrides,
            pretrained.as_deref(),
            resume.as_deref(),
        ),
        Command::Eval {
            data,
            checkpoint,
            out,
            rankings,
        } => commands::eval(&data, checkpoint.as_deref(), &out, rankings),
        Command::Sweep {
            args,
            param,
            values,
            pretrained,
        } => commands::sweep_cmd(
            &args.paths(),
            &args.overrides,
            param,
            &values,
            pretrained.as_deref(),
        ),
        Command::Ablate {
            args,
            variants,
            pretrained,
        } => commands::ablate(
            &args.paths(),
            &args.overrides,
            &variants,
            pretrained.as_deref(),
        ),
        Command::Report { runs, out } => commands::report(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Kind::Usage.code())
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

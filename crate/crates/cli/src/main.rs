use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Args, Parser, Subcommand};

mod commands;
mod config;
mod par;

#[derive(Parser)]
#[command(name = "ddfflow", version, about = "Flow-matching deformable registration on cardiac phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Synth(SynthArgs),
    /// Train a network on a phantom dataset.
    Train(TrainArgs),
    /// Predict displacement fields for an image pair or dataset cases.
    Register(RegisterArgs),
    /// Score predicted fields, or sweep sampler step counts.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// `section.key = value` file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; component seeds are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = value_parser!(u64).range(1..))]
    pub threads: u64,
    /// Extra `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_cases: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long, value_name = "DIR")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SamplerFlags {
    #[arg(long, value_parser = value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
    #[arg(long)]
    pub no_sde: bool,
    #[arg(long)]
    pub no_heun: bool,
    #[arg(long)]
    pub no_ig: bool,
    #[arg(long)]
    pub no_guidance: bool,
    #[arg(long)]
    pub instance_opt_steps: Option<usize>,
    #[arg(long)]
    pub instance_opt_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// FRWT file, or a directory holding `student.frwt`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR", conflicts_with_all = ["fixed", "moving"])]
    pub data: Option<PathBuf>,
    /// train, val, test, all, or START..END.
    #[arg(long, default_value = "test")]
    pub cases: String,
    #[arg(long, value_name = "FVOL", requires = "moving")]
    pub fixed: Option<PathBuf>,
    #[arg(long, value_name = "FVOL", requires = "fixed")]
    pub moving: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory of `register`.
    #[arg(long, value_name = "DIR")]
    pub predictions: Option<PathBuf>,
    /// Needed with `--sweep-steps`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub cases: String,
    /// Comma-separated step counts to sample and score, e.g. 1,2,5,10,20.
    #[arg(long, value_delimiter = ',', value_parser = value_parser!(u64).range(1..))]
    pub sweep_steps: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Register(a) => commands::register::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

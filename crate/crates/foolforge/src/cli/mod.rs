//! Command-line front end. One binary drives the whole workbench: corpus
//! synthesis, victim training, fooling-image generation, transfer-net
//! training, attacks, the black-box oracle, evaluation and reporting, plus
//! a `pipeline` command chaining all of it.
//!
//! Configuration precedence everywhere: command-line flag, then
//! `FOOLFORGE_*` environment variable, then `--config` TOML file, then the
//! profile's built-in default.

mod attackset;
mod commands;
mod manifest;
mod settings;

pub use attackset::{load_attack_set, save_attack_set, AttackSet, AttackSetHeader, ATTACK_KIND};
pub use manifest::{guard_fresh, FileStamp, RunManifest};
pub use settings::{
    parse_methods, resolve_config, PipelineConfig, Profile, ENV_PREFIX,
};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::eval::EvalError;
use crate::fooling::FoolingError;
use crate::ftn::FtnError;
use crate::oracle::OracleError;
use crate::tensor::TensorError;
use crate::victims::VictimError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Fooling(#[from] FoolingError),
    #[error(transparent)]
    Ftn(#[from] FtnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("config: {msg}")]
    Config { msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{msg}")]
    Usage { msg: String },
}

/// Flags shared by every artifact-producing subcommand.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; keys override profile defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Built-in default set: smoke or full.
    #[arg(long, value_name = "NAME")]
    pub profile: Option<String>,

    /// Master seed; derived seeds follow deterministically.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Directory artifacts are written into.
    #[arg(long, value_name = "DIR", default_value = "runs/out")]
    pub out: PathBuf,

    /// Overwrite artifacts that already exist.
    #[arg(long)]
    pub force: bool,
}

impl CommonArgs {
    /// Resolves the effective config for this invocation. Flags handled
    /// here and in the subcommands land last, on top of environment,
    /// config file and profile defaults.
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        let profile = match &self.profile {
            Some(p) => p.parse()?,
            None => env
                .iter()
                .find(|(k, _)| k == "FOOLFORGE_PROFILE")
                .map(|(_, v)| v.parse())
                .transpose()?
                .unwrap_or(Profile::Smoke),
        };
        let mut cfg = settings::resolve_config(profile, self.config.as_deref(), &env)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Generate the procedural corpus (the default source).
    #[arg(long)]
    pub synthetic: bool,

    /// Read CIFAR-10 binary batches from this directory instead.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub cifar_dir: Option<PathBuf>,

    /// Training images kept per class.
    #[arg(long)]
    pub per_class_train: Option<usize>,

    /// Validation images kept per class.
    #[arg(long)]
    pub per_class_val: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainVictimArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset archive written by `dataset`.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// all, train, validation, oracle, or a stock architecture name.
    #[arg(long, default_value = "all")]
    pub arch: String,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenFoolingArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Victim checkpoint the generators optimize against.
    #[arg(long, value_name = "FILE")]
    pub victim: PathBuf,

    /// all, or a comma-separated list of method names.
    #[arg(long, default_value = "all")]
    pub methods: String,

    /// Images generated per method.
    #[arg(long)]
    pub count: Option<usize>,

    /// Optimizer steps per image for the gradient methods.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Target class index.
    #[arg(long)]
    pub target: Option<usize>,

    /// Also export each image as a PNG.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct TrainFtnArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Victim checkpoint the net is conditioned on.
    #[arg(long, value_name = "FILE")]
    pub victim: PathBuf,

    /// Dataset archive providing the clean training images.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Directory of saved fooling images.
    #[arg(long, value_name = "DIR")]
    pub fooling_dir: PathBuf,

    /// Fooling method whose images form the representation bank.
    #[arg(long)]
    pub method: String,

    #[arg(long)]
    pub epochs: Option<usize>,

    /// Bank size and per-step batch size.
    #[arg(long)]
    pub n_samples: Option<usize>,

    /// Representation loss weight.
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Total-variance loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Comma-separated victim tap names.
    #[arg(long)]
    pub taps: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Transfer-net checkpoint written by `train-ftn`.
    #[arg(long, value_name = "FILE")]
    pub ftn: PathBuf,

    /// Dataset archive; the attack maps its validation images.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Validation images to map (clipped to the split size).
    #[arg(long)]
    pub count: Option<usize>,

    /// Method tag for report rows; defaults to the checkpoint stem.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeOracleArgs {
    /// Victim checkpoint served as the black box.
    #[arg(long, value_name = "FILE")]
    pub victim: PathBuf,

    /// Bind address; FOOLFORGE_ORACLE_ADDR overrides the default.
    #[arg(long)]
    pub addr: Option<String>,

    /// Write the bound address to this file once listening.
    #[arg(long, value_name = "FILE")]
    pub ready_file: Option<PathBuf>,

    /// Exit after serving this many requests; runs forever otherwise.
    #[arg(long)]
    pub max_requests: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Attack-set archive written by `attack`.
    #[arg(long, value_name = "FILE")]
    pub attack: PathBuf,

    /// Victim checkpoints to score against.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub victims: Vec<PathBuf>,

    /// Score against every .ffcls checkpoint in this directory too.
    #[arg(long, value_name = "DIR")]
    pub victims_dir: Option<PathBuf>,

    /// Also query a running oracle at this address.
    #[arg(long)]
    pub oracle_addr: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Evaluation CSVs to merge into one report.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub reports: Vec<PathBuf>,

    /// Emit spectrum and confidence plot data from this fooling directory.
    #[arg(long, value_name = "DIR")]
    pub fooling_dir: Option<PathBuf>,

    /// Transfer-net loss CSVs to reduce to plot data.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub ftn_losses: Vec<PathBuf>,

    /// Output format; only csv exists.
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Skip the oracle victim and its report rows.
    #[arg(long)]
    pub no_oracle: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or import the image corpus.
    Dataset(DatasetArgs),
    /// Train victim classifiers and checkpoint them.
    TrainVictim(TrainVictimArgs),
    /// Generate universal fooling images against a victim.
    GenFooling(GenFoolingArgs),
    /// Train the fooling-transfer network on a representation bank.
    TrainFtn(TrainFtnArgs),
    /// Map clean images through a trained net into an attack set.
    Attack(AttackArgs),
    /// Serve a victim as an HTTP black box.
    ServeOracle(ServeOracleArgs),
    /// Score an attack set against victims and optionally the oracle.
    Evaluate(EvaluateArgs),
    /// Merge evaluation CSVs and emit plot-ready data files.
    Report(ReportArgs),
    /// Run the whole experiment end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Parser)]
#[command(
    name = "foolforge",
    version,
    about = "Workbench for universal targeted fooling images and their transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Dataset(args) => commands::run_dataset(args),
        Command::TrainVictim(args) => commands::run_train_victim(args),
        Command::GenFooling(args) => commands::run_gen_fooling(args),
        Command::TrainFtn(args) => commands::run_train_ftn(args),
        Command::Attack(args) => commands::run_attack(args),
        Command::ServeOracle(args) => commands::run_serve_oracle(args),
        Command::Evaluate(args) => commands::run_evaluate(args),
        Command::Report(args) => commands::run_report(args),
        Command::Pipeline(args) => commands::run_pipeline(args),
    }
}

/// Collapses an error into the single stderr line the binary prints.
fn single_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses `args` (including the binary name) and runs the subcommand.
/// Lets tests drive the CLI in-process.
pub fn execute<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage {
        msg: e.to_string(),
    })?;
    dispatch(&cli)
}

/// Binary entry point: parse, dispatch, and fold failures into one
/// machine-parsable stderr line with a nonzero exit code.
pub fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match dispatch(&cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {}", single_line(&e.to_string()));
                ExitCode::FAILURE
            }
        },
        // clap renders help, version and usage errors itself.
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}

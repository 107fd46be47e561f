//! The `reason3d` command line: dataset generation, training, evaluation and
//! inference. Every artifact it writes carries the run config digest.

pub mod commands;
pub mod error;
pub mod log;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, Result};
pub use log::EventLog;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "R3D_SEED";

#[derive(Debug, Parser)]
#[command(name = "reason3d", version, about = "Language-prompted 3D segmentation on procedural scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset.
    Gendata(GendataArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one scene from a text query.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Rooms per scene, either `N` or an inclusive range `A-B`.
    #[arg(long, default_value = "1")]
    pub rooms: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "reasoning,search,refer")]
    pub task_mix: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub tasks_per_scene: usize,
    /// The last this many scenes form the validation split.
    #[arg(long, default_value_t = 0)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 3)]
    pub objects_per_room: usize,
    #[arg(long, default_value_t = 80)]
    pub points_per_object: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config in TOML; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train without the location token and region decoder.
    #[arg(long)]
    pub no_loc: bool,
    /// Train only the special token rows of the language model.
    #[arg(long)]
    pub freeze_lm_core: bool,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Config to use instead of the `config.toml` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate even when the checkpoint digest differs from the config's.
    #[arg(long)]
    pub force: bool,
    /// Score the ground truth against itself instead of running the model.
    #[arg(long)]
    pub predictions_from_gt: bool,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Point file to segment.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value = "reasoning")]
    pub task: String,
    /// Where the JSON result goes.
    #[arg(long)]
    pub emit_mask: PathBuf,
    /// Add a bounding box around the largest cluster of the mask.
    #[arg(long)]
    pub emit_box: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Settings that come from the environment rather than flags.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub seed_override: Option<u64>,
}

impl Context {
    pub fn from_env() -> Result<Self> {
        let seed_override = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(std::env::VarError::NotPresent) => None,
            Err(e) => return Err(CliError::Usage(format!("{SEED_ENV}: {e}"))),
        };
        Ok(Self { seed_override })
    }
}

pub fn run(cli: Cli, ctx: &Context, log: &mut EventLog) -> Result<()> {
    match cli.command {
        Command::Gendata(a) => commands::gendata(&a, log),
        Command::Train(a) => commands::train(&a, ctx, log),
        Command::Eval(a) => commands::eval(&a, log),
        Command::Infer(a) => commands::infer(&a, log),
    }
}

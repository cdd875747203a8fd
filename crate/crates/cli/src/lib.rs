//! `dualpl` command line: dataset generation, training, evaluation,
//! ablation sweeps, bank inspection and regeneration dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod ablate;
mod commands;
pub mod manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<dualpl_core::Error> for CliError {
    fn from(e: dualpl_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(runtime(&path.display().to_string()))
}

#[derive(Debug, Parser)]
#[command(name = "dualpl", version, about = "Dual-level pseudo-label self-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the paired source/target benchmark described by a config.
    GenData(GenDataArgs),
    /// Train one run and write metrics, checkpoint and bank.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sweep one config axis over several seeds.
    Ablate(AblateArgs),
    /// Print per-class slot statistics of a bank or checkpoint as JSON.
    InspectBank(InspectArgs),
    /// Dump the regeneration intermediates for one pixel or one image.
    RegenDemo(RegenArgs),
}

/// Where the run config comes from: a config file or a previous manifest.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// Run config JSON; missing keys take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of an earlier run; repeats it exactly.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.seed`.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Read the dataset from a `gen-data` directory instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    /// Run config whose `data` section is regenerated for evaluation.
    #[arg(long, required_unless_present = "data")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["source", "target"], default_value = "target")]
    split: String,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// One of K, u, phi, omega, sampling, selecting, interaction, components.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Comma-separated values replacing the axis defaults (numeric axes only).
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Bank file or checkpoint.
    path: PathBuf,
}

#[derive(Debug, Args)]
struct RegenArgs {
    /// Semantic prediction `z`, comma-separated.
    #[arg(long, requires_all = ["q_alpha", "labels"], conflicts_with_all = ["random", "checkpoint"])]
    z: Option<String>,
    /// Instance prediction over the bank slots, comma-separated.
    #[arg(long)]
    q_alpha: Option<String>,
    /// Bank slot labels, comma-separated.
    #[arg(long)]
    labels: Option<String>,
    /// Draw a random pixel with this many classes and slots instead.
    #[arg(long, num_args = 2, value_names = ["CLASSES", "SLOTS"], conflicts_with = "checkpoint")]
    random: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image mode: a checkpoint with a bank, applied to one target image.
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    /// Run config giving the dataset and `tp` for image mode.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target image index for image mode.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0.9)]
    phi: f64,
    #[arg(long, value_parser = ["smoothing", "scaling"], default_value = "smoothing")]
    z_mode: String,
    #[arg(long, value_parser = ["smoothing", "scaling"], default_value = "scaling")]
    q_mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::InspectBank(a) => commands::inspect_bank(a),
        Command::RegenDemo(a) => commands::regen_demo(a),
    }
}

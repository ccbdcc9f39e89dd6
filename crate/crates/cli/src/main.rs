//! `preprompt` command-line runner.
//!
//! Settings come from three layers: built-in defaults, then the TOML file
//! given with `--config`, then command-line flags. Exit status is 0 on
//! success, 1 on a runtime failure and 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use preprompt::harness::Method;
use preprompt::prompting::PromptMode;

#[derive(Debug, Parser)]
#[command(name = "preprompt", version, about = "Class-incremental learning with predictive prompting")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain and freeze the backbone, writing a checkpoint.
    Pretrain(PretrainArgs),
    /// Run one method over the scenario for every seed.
    Run(RunArgs),
    /// Run the six-row component ablation grid.
    Ablate(AblateArgs),
    /// Aggregate summary files into mean±std tables and complexity figures.
    Report(ReportArgs),
    /// Write prompted features of a saved PrePrompt state to CSV.
    ExportEmbeddings(ExportArgs),
}

/// Overrides shared by the commands that train learners.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', value_name = "SEEDS")]
    pub seeds: Option<Vec<u64>>,
    /// Output directory for result files.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Frozen backbone checkpoint.
    #[arg(long, value_name = "FILE")]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_name = "L")]
    pub prompt_length: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Epochs of the prompt-prediction stage.
    #[arg(long, value_name = "N")]
    pub prompt_epochs: Option<usize>,
    /// Epochs of the label stage.
    #[arg(long, value_name = "N")]
    pub label_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Prompt,
    Prefix,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Prompt => PromptMode::Prompt,
            ModeArg::Prefix => PromptMode::Prefix,
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Checkpoint path; defaults to `backbone_checkpoint` from the config.
    #[arg(short, long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short, long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Skip writing PrePrompt state files.
    #[arg(long)]
    pub no_state: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated row indices (0-5); all rows by default.
    #[arg(long, value_delimiter = ',')]
    pub rows: Option<Vec<usize>>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary CSV files or directories holding `summary.csv`. Defaults to
    /// every subdirectory of the output directory.
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// State file written by `run`.
    #[arg(long, value_name = "FILE")]
    pub state: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    pub out: PathBuf,
    /// Which split of the configured data to embed.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("PREPROMPT_LOG", "info");
    env_logger::Builder::from_env(env)
        .format_timestamp_millis()
        .format_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors 2
        Err(e) => e.exit(),
    };
    init_logging();
    match commands::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

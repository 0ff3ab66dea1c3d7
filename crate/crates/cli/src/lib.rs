//! Config-driven experiment runner. Every subcommand writes a JSON report
//! embedding the resolved config and tool version, a plot-data file and the
//! SVG chart rendered from it, plus raw timing dumps where they exist.

pub mod chart;
pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Parse(_) | CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<poolleak_core::Error> for CliError {
    fn from(e: poolleak_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "poolleak", version, about = "Max-pooling timing side-channel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pairwise class distinguishability from total inference time.
    AnalyzePairs(CommonArgs),
    /// Pairwise distinguishability from each layer's time.
    Layerwise(CommonArgs),
    /// Label recovery from timing features with an MLP classifier.
    Attack(CommonArgs),
    /// Membership inference through the timing channel.
    Mia(CommonArgs),
    /// Membership inference as a function of query-set overlap.
    Overlap(CommonArgs),
    /// Pairwise analysis with the branchy and the constant-time pooling kernel.
    CompareCountermeasure(CommonArgs),
    /// Checks that constant-time pooling does input-independent work.
    CtVerify(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Timing channel; overrides `channel`.
    #[arg(long, value_enum)]
    channel: Option<config::ChannelChoice>,
    /// Max-pool kernel; overrides `pool_variant`.
    #[arg(long, value_enum)]
    variant: Option<config::VariantChoice>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(channel) = self.channel {
            cfg.channel = channel;
        }
        if let Some(variant) = self.variant {
            cfg.pool_variant = variant;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(outcome) => {
            for path in &outcome.files {
                println!("wrote {}", path.display());
            }
            println!("{}", outcome.summary);
            0
        }
        Err(e) => {
            eprintln!("poolleak: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<commands::Outcome, CliError> {
    use commands::*;
    let (args, f): (&CommonArgs, fn(&ExperimentConfig) -> Result<Outcome, CliError>) = match command {
        Command::AnalyzePairs(a) => (a, cmd_analyze_pairs),
        Command::Layerwise(a) => (a, cmd_layerwise),
        Command::Attack(a) => (a, cmd_attack),
        Command::Mia(a) => (a, cmd_mia),
        Command::Overlap(a) => (a, cmd_overlap),
        Command::CompareCountermeasure(a) => (a, cmd_compare_countermeasure),
        Command::CtVerify(a) => (a, cmd_ct_verify),
    };
    f(&args.resolve()?)
}

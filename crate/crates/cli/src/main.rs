//! `degenhedge` command-line front end.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use degenhedge::config::OutputFormat;
use degenhedge::Error;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  check failed (model admits arbitrage in `validate`, replication error above run.max_replication_error in `backtest`)
  2  schema or argument error
  3  arbitrage detected while pricing or hedging
  4  numerical failure (non-finite values, path explosion)
  5  ill-conditioned regression
  6  contract violation (training seed reused, plan fitted on another model, grid mismatch)
  7  I/O error

Environment:
  DEGENHEDGE_LOG  log filter, e.g. `info` or `degenhedge=debug` (default `warn`)";

#[derive(Parser, Debug)]
#[command(
    name = "degenhedge",
    version,
    about = "Price, hedge and backtest claims on diffusion markets with singular volatility",
    after_help = AFTER_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check that the market admits a market price of risk; exits 1 if not.
    Validate(CommonArgs),
    /// Simulate paths and dump states and Brownian increments.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// measure to simulate under
        #[arg(long, value_enum, default_value_t = MeasureArg::P)]
        measure: MeasureArg,
    },
    /// Monte Carlo price of the configured payoff.
    Price(CommonArgs),
    /// Fit a hedge plan; always writes plan.json, the input of `backtest`.
    Hedge(CommonArgs),
    /// Replay a plan on fresh paths. `--seed` sets the backtest seed.
    Backtest {
        #[command(flatten)]
        common: CommonArgs,
        /// plan file written by `hedge`
        #[arg(long)]
        plan: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML config with model, payoff, run and output sections
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (overrides output.directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// seed (overrides run.seed, or run.backtest_seed for `backtest`)
    #[arg(long)]
    pub seed: Option<u64>,
    /// number of paths (overrides run.paths)
    #[arg(long)]
    pub paths: Option<usize>,
    /// number of time steps (overrides run.steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// worker threads; results do not depend on it
    #[arg(long)]
    pub workers: Option<usize>,
    /// artifact formats (overrides output.formats)
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatArg {
    Json,
    Csv,
    Both,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => OutputFormat::Json,
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Both => OutputFormat::Both,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureArg {
    P,
    Q,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema(_)
        | Error::DimensionMismatch { .. }
        | Error::UnsupportedFamily(_)
        | Error::UnsupportedJacobian(_)
        | Error::InvalidArgument(_)
        | Error::TooFewSamples { .. } => 2,
        Error::ArbitrageDetected { .. } => 3,
        Error::NonFinite { .. } | Error::Numerical(_) => 4,
        Error::IllConditioned { .. } => 5,
        Error::SeedReuse(_) | Error::ModelMismatch { .. } | Error::GridMismatch => 6,
        Error::Io(_) => 7,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEGENHEDGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(c) => commands::validate(&c),
        Command::Simulate { common, measure } => commands::simulate(&common, measure),
        Command::Price(c) => commands::price(&c),
        Command::Hedge(c) => commands::hedge(&c),
        Command::Backtest { common, plan } => commands::backtest(&common, &plan),
    };
    match result {
        Ok(passed) => ExitCode::from(if passed { 0 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

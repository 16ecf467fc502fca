//! Batch CLI for simulating and fitting marked spatial point process models.
//!
//! Four subcommands: `simulate` draws a synthetic pattern from a configured
//! model, `fit` runs adaptive MCMC on an observed pattern, `compare` ranks
//! finished fits by WAIC, and `summarize` builds a posterior table from chain
//! files. Runs are driven by a TOML config; everything a run produces lands
//! in its output directory together with a manifest for reproduction.
//!
//! Exit codes: 0 success, 2 usage/config/IO, 3 malformed input data,
//! 4 numerical failure, 5 incomparable models.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgcp::error::Error;

#[derive(Parser)]
#[command(name = "lgcp", version, about = "Marked spatial point process simulation and fitting")]
struct Cli {
    /// Print progress information to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic point pattern from the [simulate] table of a config.
    Simulate(RunArgs),
    /// Fit the [model] table of a config to an observed pattern by MCMC.
    Fit(RunArgs),
    /// Rank finished fit directories by WAIC.
    Compare(CompareArgs),
    /// Summarize posterior chain CSV files into one table.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override mcmc.iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Override mcmc.burnin.
    #[arg(long)]
    burnin: Option<usize>,
    /// Override mcmc.thin.
    #[arg(long)]
    thin: Option<usize>,
    /// Override mcmc.chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Override model.knots.
    #[arg(long)]
    knots: Option<usize>,
    /// Override integration.budget.
    #[arg(long)]
    budget: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> run::Overrides {
        run::Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            iters: self.iters,
            burnin: self.burnin,
            thin: self.thin,
            chains: self.chains,
            knots: self.knots,
            budget: self.budget,
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Fit output directories (each must contain waic.json).
    #[arg(required = true)]
    fits: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Chain CSV file; repeat to pool several chains.
    #[arg(long, required = true)]
    chain: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

/// Stderr logger gated on --verbose (warnings always shown).
struct StderrLogger;

static LOGGER: StderrLogger = StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("{}: {}", record.level().to_string().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::InsufficientBudget { .. } | Error::Io { .. } => 2,
        Error::ParseError { .. } | Error::DomainError { .. } | Error::InvalidMark { .. } => 3,
        Error::IncomparableModels { .. } => 5,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(level));

    let result = match &cli.command {
        Command::Simulate(args) => run::load_config(&args.config, &args.overrides())
            .and_then(|cfg| run::cmd_simulate(&cfg)),
        Command::Fit(args) => run::load_config(&args.config, &args.overrides())
            .and_then(|cfg| run::cmd_fit(&cfg)),
        Command::Compare(args) => run::cmd_compare(&args.fits, &args.output_dir),
        Command::Summarize(args) => run::cmd_summarize(&args.chain, &args.output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&err))
        }
    }
}

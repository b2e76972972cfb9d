//! Command-line front end: data ingestion, model configuration, test
//! execution, goodness-of-fit checks, effect estimation, and the simulation
//! and power experiments, all with machine-readable outputs.
//!
//! Exit codes: 0 success; 1 error (a JSON `{"error": {code, message}}`
//! object goes to stderr); 2 when `--strict` is set and statistical
//! warnings were produced.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

pub mod build;
pub mod commands;
pub mod config;
pub mod data;
pub mod report;

use commands::CommandContext;

#[derive(Parser, Debug)]
#[command(
    name = "merit",
    about = "Measurement-error-robust tests of treatment effect",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a robust test (and optional goodness-of-fit checks) on a CSV.
    Test(AnalysisArgs),
    /// Estimate the additive structural effect by profile inversion.
    Estimate(AnalysisArgs),
    /// Monte Carlo rejection-rate grid over reliability ratios and regimes.
    Simulate(ExperimentArgs),
    /// Monte Carlo power curves over a grid of structural effects.
    Power(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct AnalysisArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML analysis configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for reports.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Recorded in the report (analysis commands are deterministic).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Exit with code 2 when statistical warnings are produced.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for reports.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Overrides the seed in the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Exit with code 2 when statistical warnings are produced.
    #[arg(long)]
    pub strict: bool,
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore the error when a global pool already exists (tests call
        // commands repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Test(args) => {
            init_threads(args.threads);
            CommandContext::load(&args.config, args.out_dir.clone(), args.seed, args.strict)
                .and_then(|ctx| commands::run_test(&ctx, &args.data).map(|w| (w, ctx.strict)))
        }
        Command::Estimate(args) => {
            init_threads(args.threads);
            CommandContext::load(&args.config, args.out_dir.clone(), args.seed, args.strict)
                .and_then(|ctx| commands::run_estimate(&ctx, &args.data).map(|w| (w, ctx.strict)))
        }
        Command::Simulate(args) => {
            init_threads(args.threads);
            CommandContext::load(&args.config, args.out_dir.clone(), args.seed, args.strict)
                .and_then(|ctx| commands::run_simulate(&ctx).map(|w| (w, ctx.strict)))
        }
        Command::Power(args) => {
            init_threads(args.threads);
            CommandContext::load(&args.config, args.out_dir.clone(), args.seed, args.strict)
                .and_then(|ctx| commands::run_power(&ctx).map(|w| (w, ctx.strict)))
        }
    };
    match result {
        Ok((warnings, strict)) => {
            if strict && warnings > 0 {
                2
            } else {
                0
            }
        }
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "code": e.code(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            1
        }
    }
}

/// Parses raw arguments (without the program name) and runs them.
pub fn run_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut argv: Vec<String> = vec!["merit".into()];
    argv.extend(args.into_iter().map(Into::into));
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli),
        Err(e) => {
            // Help and version exit 0 by clap convention.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

//! `vpgm` — verbalized probabilistic graphical modeling from the command
//! line: discover a structure, sample verbalized inferences, aggregate them,
//! fit the Bayesian prior strength, and report calibration.

mod config;
mod error;
mod manifest;
mod runctx;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::runctx::RunContext;

#[derive(Parser)]
#[command(
    name = "vpgm",
    version,
    about = "Verbalized probabilistic graphical modeling with Bayesian aggregation",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the model for a task structure and save it as pgm.json
    Discover {
        /// Also write the accepted structure to this path
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Sample verbalized inferences over a question split
    Infer {
        /// Which configured split to run: dev, test, or both
        #[arg(long, default_value = "both")]
        split: String,
        /// Run over this dataset instead of a configured split
        #[arg(long, value_name = "FILE", requires = "records_out")]
        dataset: Option<PathBuf>,
        /// Where to write records for a custom --dataset
        #[arg(long, value_name = "FILE")]
        records_out: Option<PathBuf>,
    },
    /// Reduce inference records to vote counts and expected distributions
    Aggregate {
        /// Use the conventional files for this split: dev or test
        #[arg(long)]
        split: Option<String>,
        /// Records file to aggregate (needs --dataset)
        #[arg(long, value_name = "FILE")]
        records: Option<PathBuf>,
        /// Dataset supplying options and gold labels
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Fit artifact; when given, rows also carry the posterior at its lambda
        #[arg(long, value_name = "FILE")]
        fit: Option<PathBuf>,
        /// Output JSONL path
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Fit the prior strength lambda on aggregated dev rows
    FitLambda {
        /// Aggregated rows to fit on (default: posteriors-dev.jsonl)
        #[arg(long, value_name = "FILE")]
        records: Option<PathBuf>,
        /// Output path for the fit artifact (default: fit.json)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score aggregated test rows and write the calibration report
    Evaluate {
        /// Aggregated rows to score (default: posteriors-test.jsonl)
        #[arg(long, value_name = "FILE")]
        records: Option<PathBuf>,
        /// Fit artifact supplying lambda (default: fit.json)
        #[arg(long, value_name = "FILE")]
        fit: Option<PathBuf>,
        /// Report JSON path (default: report.json)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Reliability CSV path (default: report.csv)
        #[arg(long, value_name = "FILE")]
        reliability: Option<PathBuf>,
        /// Reliability diagram path (default: reliability.svg)
        #[arg(long, value_name = "FILE")]
        svg: Option<PathBuf>,
    },
    /// Derange rationales across the dataset to build a noisy control
    Control {
        /// Dataset to derange (default: the configured test split)
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Output JSONL path (default: control-dataset.jsonl)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compare latent behavior between a clean and a noisy run
    AnalyzeLatents {
        /// Clean-run records (default: records-test.jsonl)
        #[arg(long, value_name = "FILE")]
        clean: Option<PathBuf>,
        /// Noisy-run records (default: records-noisy.jsonl)
        #[arg(long, value_name = "FILE")]
        noisy: Option<PathBuf>,
        /// Latent variable expected to react to the noise (default: configured)
        #[arg(long, value_name = "ID")]
        var: Option<String>,
        /// Dataset supplying options and gold labels (default: test split)
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Output path (default: latent-analysis.json)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run infer, aggregate, fit-lambda, and evaluate end to end
    Pipeline,
    /// Print a saved report in a readable layout
    Report {
        /// Report file (default: report.json in the run directory)
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::resolve(&cli.overrides)?;
    if let Command::Report { report } = cli.command {
        // Read-only: no lock, no manifest.
        let text = stages::cmd_report(config.run_dir()?, report)?;
        print!("{text}");
        return Ok(());
    }
    let mut ctx = RunContext::open(config)?;
    match cli.command {
        Command::Discover { out } => stages::cmd_discover(&mut ctx, out).await,
        Command::Infer { split, dataset, records_out } => {
            stages::cmd_infer(&mut ctx, &split, dataset, records_out).await
        }
        Command::Aggregate { split, records, dataset, fit, out } => {
            stages::cmd_aggregate(&mut ctx, split.as_deref(), records, dataset, fit, out)
        }
        Command::FitLambda { records, out } => stages::cmd_fit(&mut ctx, records, out),
        Command::Evaluate { records, fit, out, reliability, svg } => {
            stages::cmd_evaluate(&mut ctx, records, fit, out, reliability, svg)
        }
        Command::Control { data, out } => stages::cmd_control(&mut ctx, data, out),
        Command::AnalyzeLatents { clean, noisy, var, dataset, out } => {
            stages::cmd_analyze(&mut ctx, clean, noisy, var, dataset, out)
        }
        Command::Pipeline => stages::cmd_pipeline(&mut ctx).await,
        Command::Report { .. } => unreachable!("handled above"),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

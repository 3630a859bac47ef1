//! `helut` — drive encrypted embedding-lookup experiments from JSON configs.
//!
//! Subcommands: `lookup` (one encrypted lookup under a chosen strategy),
//! `compare` (baseline-vs-packed sweep over hidden dimensions), `dlrm`
//! (end-to-end encrypted inference), and `llm` (sequence-embedding
//! scenarios). Every run writes deterministic reports into the output
//! directory; identical config + seed produces byte-identical files.
//!
//! Exit codes: 0 ok, 2 config error, 3 level error, 4 capacity error.

use clap::{Args, Parser, Subcommand};
use helut_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

mod run;

#[derive(Parser)]
#[command(
    name = "helut",
    version,
    about = "Encrypted embedding-lookup experiment driver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Built-in cost table name ("cpu-default", "llm-reference") or a path
    /// to a cost-table JSON file; names are also searched in $HELUT_COST_DIR.
    #[arg(long, default_value = "cpu-default")]
    cost_table: String,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one encrypted lookup (strategies: onehot, digit_bsgs, coded_helut).
    Lookup {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the config's strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Sweep hidden dimensions, comparing the baseline against the packed lookup.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// End-to-end encrypted recommendation-model inference.
    Dlrm {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sequence-embedding scenarios (column-packed vs block-diagonal).
    Llm {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Level(_) => 3,
        Error::Capacity(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Lookup { common, strategy } => run::lookup(&common, strategy.as_deref()),
        Command::Compare { common } => run::compare(&common),
        Command::Dlrm { common } => run::dlrm(&common),
        Command::Llm { common } => run::llm(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

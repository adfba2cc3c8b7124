//! `groupreg` command-line front-end.
//!
//! Exit status: 0 on success, 1 on internal or degenerate-data errors, 2 on usage and
//! input errors (bad flags, unreadable or malformed files, out-of-range configuration).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "groupreg", version, about = "Groupwise multi-modal diffeomorphic registration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); a run manifest is also accepted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GROUPREG_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a group of images into a common space.
    Register(commands::RegisterArgs),
    /// Score transforms against labels and/or ground-truth displacements.
    Evaluate(commands::EvaluateArgs),
    /// Write a synthetic phantom group with ground truth.
    Synth(commands::SynthArgs),
    /// Emit plot-ready CSV series.
    Plotdata(commands::PlotdataArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Register(a) => commands::register(&cli.common, a),
        Command::Evaluate(a) => commands::evaluate(&cli.common, a),
        Command::Synth(a) => commands::synth(&cli.common, a),
        Command::Plotdata(a) => commands::plotdata(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line driver for dataset generation, training, tuning, sampling
//! and evaluation.
//!
//! Exit codes: 0 success, 1 usage, 2 data or path error, 3 numeric failure.

pub mod args;
mod data;
mod error;
mod evaluate;
mod run;
mod sample;
mod train;
mod tune;

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::Parser;

use crate::args::{Cli, Command};
pub use crate::error::{CliError, Result};
pub use crate::run::{RunItem, SampleRun, RUN_NAME};

/// Parse `args` (program name first), run the subcommand and return the
/// process exit code. Errors are reported on stderr.
pub fn run_from<I, T>(args: I) -> i32
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
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => data::gen_data(&a),
        Command::Verify(a) => data::verify(&a),
        Command::Train(a) => train::train(&a),
        Command::Sample(a) => sample::sample(&a),
        Command::Evaluate(a) => evaluate::evaluate(&a),
        Command::Tune(a) => tune::tune(&a),
    }
}

fn threads(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Path(format!("{what} {} is not a directory", path.display())))
    }
}

/// Create `path` if needed and make sure files can be written into it.
fn prepare_out(path: &Path) -> Result<()> {
    let fail = |e: std::io::Error| CliError::Path(format!("cannot write to {}: {e}", path.display()));
    fs::create_dir_all(path).map_err(fail)?;
    let probe = path.join(".write-probe");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let out: Option<Vec<T>> = s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| v.parse().ok()).collect();
    match out {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("bad {what} list `{s}`"))),
    }
}

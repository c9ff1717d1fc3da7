//! Command-line front-end: dataset generation, training, sweeps and
//! per-type reports, writing CSV logs and static SVG charts.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod plot;

use clap::Parser;

pub use error::{CliError, CliResult, EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE};

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("advreg: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end: CSV ingestion, configuration, and the `fit`,
//! `simulate`, `itr` and `report` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod logging;

use std::ffi::OsString;

use clap::Parser;

use crate::config::{Cli, CommandKind, RunConfig};
use crate::error::{CliError, CliResult, EXIT_INPUT, EXIT_OK};

fn execute(config: &RunConfig) -> CliResult<()> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = config.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| CliError::input(format!("cannot start worker pool: {e}")))?
    };
    log::info!("{:?} with {} worker thread(s)", config.command, pool.current_num_threads());
    pool.install(|| match config.command {
        CommandKind::Fit => commands::cmd_fit(config),
        CommandKind::Simulate => commands::cmd_simulate(config),
        CommandKind::Itr => commands::cmd_itr(config),
        CommandKind::Report => commands::cmd_report(config),
    })
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
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let config = match RunConfig::resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let log_path = config.output_file("log");
    if let Err(e) = logging::start(&log_path) {
        let e = CliError::io(&log_path, e);
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let code = match execute(&config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    logging::finish();
    code
}

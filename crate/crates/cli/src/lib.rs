//! Command-line front end of the pretraining pipeline.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::{CommandFactory, Parser};

pub use args::{Cli, Command};
pub use error::CliError;

/// Parses `argv` (program name first), merges any `--config` file and runs
/// the subcommand. Help and version requests return `Ok`.
pub fn run(argv: Vec<OsString>) -> Result<(), CliError> {
    let argv = config::merge_argv(Cli::command(), argv)?;
    let cli = Cli::try_parse_from(argv)?;
    dispatch(&cli.command)
}

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => commands::synth(a),
        Command::SelectGenes(a) => commands::select_genes(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Probe(a) => commands::probe(a),
        Command::Attn(a) => commands::attn(a),
        Command::Report(a) => commands::report(a),
    }
}

/// Runs and reports, returning the process exit code.
pub fn main_with(argv: Vec<OsString>) -> u8 {
    match run(argv) {
        Ok(()) => 0,
        Err(CliError::Clap(e)) if !e.use_stderr() => {
            let _ = e.print();
            0
        }
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

mod args;
mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{ColorChoice, CommandFactory, FromArgMatches};

use crate::args::{Cli, Command};
use crate::error::CliResult;

fn run() -> CliResult<()> {
    let color = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        ColorChoice::Never
    } else {
        ColorChoice::Auto
    };
    let matches = Cli::command().color(color).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::Bench(a) => commands::bench(&config::bench(sub, a)?),
        Command::Gradcheck(a) => commands::gradcheck(&config::gradcheck(sub, a)?),
        Command::Spectra(a) => commands::spectra(&config::spectra(sub, a)?),
        Command::Train(a) => commands::train_cmd(&config::train(sub, a)?),
        Command::Ablate(a) => commands::ablate(&config::ablate(sub, a)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

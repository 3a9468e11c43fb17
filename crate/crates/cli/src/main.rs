//! `idl` command-line driver. Exit codes: 0 success, 1 invalid usage or
//! input, 2 failure while running.

mod args;
mod commands;
mod run;

use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use idl_core::Error;
use thiserror::Error;

use args::{Cli, Command};
use run::{default_run_dir, RunDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_)
            | Error::MalformedRecord { .. }
            | Error::UnknownSplit(_)
            | Error::DuplicatePath(_)
            | Error::UnsupportedSampleRate(_)
            | Error::NotMono(_)
            | Error::UnsupportedEncoding(_)
            | Error::InsufficientSpeakers { .. }
            | Error::MissingPseudoLabel(_)
            | Error::UnsupportedVersion(_) => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

fn execute(command: &Command) -> Result<(), CliError> {
    if let Command::Pretrain(a) = command {
        commands::check_pretrain(a)?;
    }
    let dir = command
        .run_dir()
        .cloned()
        .unwrap_or_else(|| default_run_dir(command.name()));
    let run = RunDir::acquire(&dir)?;
    match command {
        Command::Synth(a) => commands::synth(a, &run),
        Command::Features(a) => commands::features(a, &run),
        Command::Pretrain(a) => commands::pretrain_cmd(a, &run),
        Command::Cluster(a) => commands::cluster(a, &run),
        Command::Finetune(a) => commands::finetune(a, &run),
        Command::Eval(a) => commands::eval(a, &run),
        Command::Probe(a) => commands::probe(a, &run),
        Command::AugmentPreview(a) => commands::augment_preview(a, &run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

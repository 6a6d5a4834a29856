//! `stereo-depth`: generate synthetic stereo data, train, infer and evaluate.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod opts;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use opts::{Cli, Command};

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(msg.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<stereo_depth::Error> for Failure {
    fn from(e: stereo_depth::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(opts::resolve(&a, a.common.config.as_deref())?),
        Command::Train(a) => commands::train(opts::resolve(&a, a.common.config.as_deref())?),
        Command::Infer(a) => commands::infer(opts::resolve(&a, a.common.config.as_deref())?),
        Command::Eval(a) => commands::eval(opts::resolve(&a, a.common.config.as_deref())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap exits with 2 on its own usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

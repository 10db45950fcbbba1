//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 data
//! errors (missing or unreadable images, malformed protocols), 4 numeric
//! failure during training, 1 anything else.
//!
//! `OCTUPLET_THREADS` sets the worker thread count.

mod args;
mod commands;
mod plots;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<octuplet::Error>())
        .map_or(1, |e| e.kind().exit_code() as u8)
}

fn configure_threads() -> Result<(), octuplet::Error> {
    let Ok(value) = std::env::var("OCTUPLET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| octuplet::Error::Config(format!("OCTUPLET_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| octuplet::Error::Config(e.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Pairs(a) => commands::pairs(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

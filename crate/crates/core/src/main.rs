use std::process::ExitCode;

use clap::Parser;

use amq_core::cli::{run, Cli, RunOptions};

fn main() -> ExitCode {
    let code = run(Cli::parse(), &RunOptions::from_env());
    ExitCode::from(code as u8)
}

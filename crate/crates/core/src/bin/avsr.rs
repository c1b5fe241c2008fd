use std::process::ExitCode;

use clap::Parser;

use avsr::commands::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avsr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match cptr_cli::run(cptr_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

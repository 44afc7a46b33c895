use std::process::ExitCode;

use oodkit::cli::{execute, parse_command};

fn main() -> ExitCode {
    let plan = match parse_command(std::env::args_os()) {
        Ok(p) => p,
        Err(e) => e.exit(),
    };
    match execute(&plan) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("oodkit {}: {e}", plan.command.as_str());
            ExitCode::FAILURE
        }
    }
}

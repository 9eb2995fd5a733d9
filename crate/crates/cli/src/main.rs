use std::io::Write;
use std::process::ExitCode;

use afpn_cli::{run, Cli, EXIT_CHECK_FAILED};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            // A closed pipe (`afpn describe ... | head`) is not an error.
            let _ = std::io::stdout().write_all(out.text.as_bytes());
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

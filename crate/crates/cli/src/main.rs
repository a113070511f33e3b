use std::process::ExitCode;

use clap::Parser;
use natforge_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(result) => {
            print!("{}", result.summary);
            for path in &result.artifacts {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::from(result.exit_code.clamp(0, 255) as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use pathvlm::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Some(m)) => {
            println!(
                "{}: wrote {} output files (config {})",
                m.command,
                m.outputs.len(),
                &m.config_hash[..12]
            );
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

use zakai_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for r in &outcome.reports {
                println!("{:<12} {:<48} {:>12.4e}  {}", r.suite, r.label, r.residual, r.verdict.as_str());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use steinlab_cli::commands::{render, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = match run(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("steinlab: {e}");
            return ExitCode::from(2);
        }
    };
    let text = match render(&report, cli.common.format) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("steinlab: {e}");
            return ExitCode::from(2);
        }
    };
    match &cli.common.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &text) {
                eprintln!("steinlab: cannot write {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
        None => print!("{text}"),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

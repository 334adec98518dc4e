use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use sdn_cli::commands::{run, Cli};
use sdn_cli::CliError;

/// Prints a single `error[<category>]: <message>` line.
fn report(category: &str, msg: &str) {
    let one_line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{category}]: {one_line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            report("usage", first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli).context("sdn") {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (cat, code) = match e.downcast_ref::<CliError>() {
                Some(c @ CliError::Usage(_)) => (c.category(), 2),
                Some(c) => (c.category(), 1),
                None => ("internal", 1),
            };
            report(cat, format!("{e:#}").trim_start_matches("sdn: "));
            ExitCode::from(code)
        }
    }
}

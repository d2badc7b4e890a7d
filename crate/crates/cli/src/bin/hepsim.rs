use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hepinfo_core::sim::{balance_report, run, Scenario};

#[derive(Debug, Parser)]
#[command(name = "hepsim", about = "Replay a scenario through the scheduler on a virtual clock")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print the dispatch log and per-node balance for a scenario file.
    Run { scenario: PathBuf },
}

fn main() -> ExitCode {
    let Cmd::Run { scenario } = Args::parse().command;
    let text = match std::fs::read_to_string(&scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("hepsim: {}: {e}", scenario.display());
            return ExitCode::from(2);
        }
    };
    let log = match Scenario::parse(&text).and_then(|s| run(&s)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("hepsim: {e}");
            return ExitCode::from(2);
        }
    };
    print!("{log}");
    print!("{}", balance_report(&log));
    ExitCode::SUCCESS
}

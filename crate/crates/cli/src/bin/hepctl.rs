use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use hepinfo::client;
use hepinfo::ctl::{build_request, render, CtlArgs, EXIT_CONNECTION, EXIT_USAGE};

fn main() -> ExitCode {
    let args = CtlArgs::parse();
    let user = std::env::var("USER").or_else(|_| std::env::var("LOGNAME")).ok();
    let cwd = std::env::current_dir().ok();
    let req = match build_request(&args.command, user.as_deref(), cwd.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("hepctl: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let out = match client::request(&args.master, &req, Duration::from_secs(10)) {
        Ok(replies) => render(&req, &replies),
        Err(e) => {
            eprintln!("hepctl: {e}");
            return ExitCode::from(EXIT_CONNECTION as u8);
        }
    };
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    let _ = std::io::stdout().flush();
    ExitCode::from(out.code as u8)
}

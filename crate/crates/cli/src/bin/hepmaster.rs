use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use hepinfo_core::ledger::FileLedger;
use hepinfo_core::master::Master;
use hepinfo_core::{Clock, Config, SystemClock};

#[derive(Debug, Parser)]
#[command(name = "hepmaster", about = "hepinfo scheduling master")]
struct Args {
    #[arg(long, default_value = "0.0.0.0:7070")]
    listen: String,
    /// Write-ahead job ledger; replayed on start.
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long, default_value_t = Config::default().heartbeat_interval_ms)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = Config::default().stale_after_ms)]
    stale_ms: u64,
    /// Score deducted per dispatch since a node's last heartbeat.
    #[arg(long, default_value_t = Config::default().dispatch_penalty_milli)]
    penalty: u64,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let cfg = Config {
        heartbeat_interval_ms: args.heartbeat_ms,
        stale_after_ms: args.stale_ms,
        dispatch_penalty_milli: args.penalty,
        ..Config::default()
    };
    cfg.validate()?;
    let (ledger, replay) =
        FileLedger::open(&args.ledger).with_context(|| format!("opening ledger {}", args.ledger.display()))?;
    let recovered = replay.jobs.len();
    let master = Master::recover(cfg, ledger, replay, SystemClock::new().now_ms())?;
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    let addr = listener.local_addr()?;
    println!("hepmaster listening on {addr}");
    std::io::stdout().flush()?;
    if recovered > 0 {
        eprintln!("hepmaster: recovered {recovered} jobs from ledger");
    }
    hepinfo::server::serve(listener, master, Arc::new(AtomicBool::new(false)))
}

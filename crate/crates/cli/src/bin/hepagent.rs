use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use clap::Parser;
use hepinfo::agentd::{Agent, AgentOptions};
use hepinfo::ctl::DEFAULT_MASTER;
use hepinfo_core::agent::ProcProbe;
use hepinfo_core::{Config, NodeId};

#[derive(Debug, Parser)]
#[command(name = "hepagent", about = "hepinfo worker agent")]
struct Args {
    #[arg(long, env = "HEP_MASTER_ADDR", default_value = DEFAULT_MASTER)]
    master: String,
    #[arg(long, value_parser = |s: &str| NodeId::new(s).map_err(|e| e.to_string()))]
    node_id: NodeId,
    /// Jobs may only run in directories below this path.
    #[arg(long, default_value = "/Jugrid")]
    workroot: PathBuf,
    #[arg(long, default_value_t = Config::default().heartbeat_interval_ms)]
    heartbeat_ms: u64,
    /// Address to advertise instead of the local end of the master connection.
    #[arg(long)]
    ip: Option<Ipv4Addr>,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let opts = AgentOptions {
        master: args.master,
        node_id: args.node_id,
        workroot: args.workroot,
        heartbeat: Duration::from_millis(args.heartbeat_ms.max(1)),
        ip: args.ip,
    };
    Agent::new(opts, Arc::new(ProcProbe::new()), Arc::new(AtomicBool::new(false))).run()
}

//! Worker agent: registers with the master, heartbeats, and runs dispatched jobs.

use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{IpAddr, Ipv4Addr, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, Result};
use hepinfo_core::agent::{self, SystemProbe};
use hepinfo_core::protocol::{decode, encode, Message, MAX_LINE};
use hepinfo_core::{Clock, JobId, NodeId, NodeStatic, SystemClock};

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub master: String,
    pub node_id: NodeId,
    pub workroot: PathBuf,
    pub heartbeat: Duration,
    /// Address to advertise; defaults to the local end of the master connection.
    pub ip: Option<Ipv4Addr>,
}

type Probe = Arc<dyn SystemProbe + Send + Sync>;

/// The write half of the current master connection, if any.
#[derive(Clone, Default)]
struct Outbox(Arc<Mutex<Option<TcpStream>>>);

impl Outbox {
    fn send(&self, msg: &Message) -> io::Result<()> {
        let mut g = self.0.lock().unwrap();
        match g.as_mut() {
            Some(s) => s.write_all(encode(msg).as_bytes()),
            None => Err(io::Error::new(io::ErrorKind::NotConnected, "no master connection")),
        }
    }

    fn set(&self, s: Option<TcpStream>) {
        *self.0.lock().unwrap() = s;
    }
}

pub struct Agent {
    opts: AgentOptions,
    probe: Probe,
    clock: Arc<SystemClock>,
    running: Arc<Mutex<HashSet<JobId>>>,
    outbox: Outbox,
    stop: Arc<AtomicBool>,
}

impl Agent {
    pub fn new(opts: AgentOptions, probe: Probe, stop: Arc<AtomicBool>) -> Agent {
        Agent {
            opts,
            probe,
            clock: Arc::new(SystemClock::new()),
            running: Arc::default(),
            outbox: Outbox::default(),
            stop,
        }
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    /// Connects, serves one session, and reconnects until stopped.
    pub fn run(&self) -> Result<()> {
        while !self.stopped() {
            let addr = self.opts.master.clone();
            let stop = self.stop.clone();
            let stream = agent::connect_with_backoff(
                || TcpStream::connect(&addr),
                |d| sleep_unless(&stop, d),
                || !stop.load(Ordering::Acquire),
            );
            let Some(stream) = stream else { break };
            if let Err(e) = self.session(stream) {
                eprintln!("hepagent: session ended: {e:#}");
            }
        }
        Ok(())
    }

    fn static_info(&self, stream: &TcpStream) -> Result<NodeStatic> {
        let ip = match (self.opts.ip, stream.local_addr()?.ip()) {
            (Some(ip), _) => ip,
            (None, IpAddr::V4(v4)) => v4,
            (None, IpAddr::V6(v6)) => v6.to_ipv4_mapped().unwrap_or(Ipv4Addr::LOCALHOST),
        };
        Ok(NodeStatic {
            id: self.opts.node_id.clone(),
            ip,
            cpu_cores: self.probe.cores()?,
            total_mem_bytes: self.probe.mem_total_bytes()?,
        })
    }

    fn session(&self, stream: TcpStream) -> Result<()> {
        let _ = stream.set_nodelay(true);
        let info = self.static_info(&stream)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        self.outbox.set(Some(stream.try_clone()?));
        self.outbox.send(&Message::Register(info))?;
        match read_message(&mut reader)? {
            Some(Message::Ok) => {}
            Some(other) => return Err(anyhow!("registration refused: {other}")),
            None => return Err(anyhow!("master closed during registration")),
        }
        eprintln!("hepagent: registered as {}", self.opts.node_id);

        let alive = Arc::new(AtomicBool::new(true));
        let hb = self.spawn_heartbeat(alive.clone());
        let result = self.read_loop(&mut reader);
        alive.store(false, Ordering::Release);
        self.outbox.set(None);
        let _ = stream.shutdown(std::net::Shutdown::Both);
        let _ = hb.join();
        result
    }

    fn spawn_heartbeat(&self, alive: Arc<AtomicBool>) -> thread::JoinHandle<()> {
        let node = self.opts.node_id.clone();
        let interval = self.opts.heartbeat;
        let probe = self.probe.clone();
        let clock = self.clock.clone();
        let running = self.running.clone();
        let outbox = self.outbox.clone();
        let stop = self.stop.clone();
        thread::spawn(move || {
            let keep = || alive.load(Ordering::Acquire) && !stop.load(Ordering::Acquire);
            let _ = agent::heartbeat_loop(
                &node,
                interval,
                probe.as_ref(),
                clock.as_ref(),
                || running.lock().unwrap().len() as u32,
                |d| sleep_while(&keep, d),
                |m| outbox.send(&m),
                keep,
            );
        })
    }

    fn read_loop(&self, reader: &mut BufReader<TcpStream>) -> Result<()> {
        while !self.stopped() {
            match read_message(reader)? {
                None => return Ok(()),
                Some(Message::Dispatch { job_id, spec }) => self.start_job(job_id, spec),
                Some(Message::Err { code, text }) => eprintln!("hepagent: master error {code} {text}"),
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn start_job(&self, job_id: JobId, spec: hepinfo_core::JobSpec) {
        if !self.running.lock().unwrap().insert(job_id) {
            // a repeated dispatch of a job already running here
            return;
        }
        let node = self.opts.node_id.clone();
        let root = self.opts.workroot.clone();
        let running = self.running.clone();
        let outbox = self.outbox.clone();
        let now = self.clock.now_ms();
        thread::spawn(move || {
            let reply = agent::run_dispatch(&node, job_id, &spec, &root, now);
            running.lock().unwrap().remove(&job_id);
            if let Err(e) = outbox.send(&reply) {
                eprintln!("hepagent: could not report job {job_id}: {e}");
            }
        });
    }
}

/// Reads one line and decodes it. `Ok(None)` at end of stream; undecodable
/// lines are skipped.
fn read_message(reader: &mut BufReader<TcpStream>) -> Result<Option<Message>> {
    loop {
        let mut line = Vec::new();
        let n = reader.by_ref().take(MAX_LINE as u64 + 2).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(None);
        }
        if line.last() != Some(&b'\n') {
            return Err(anyhow!("line too long or truncated"));
        }
        match std::str::from_utf8(&line).map_err(|_| ()).and_then(|s| decode(s).map_err(|_| ())) {
            Ok(m) => return Ok(Some(m)),
            Err(()) => eprintln!("hepagent: ignoring malformed line from master"),
        }
    }
}

fn sleep_unless(stop: &AtomicBool, d: Duration) {
    sleep_while(&|| !stop.load(Ordering::Acquire), d)
}

/// Sleeps for `d` in short steps, returning early once `cond` fails.
fn sleep_while(cond: &dyn Fn() -> bool, d: Duration) {
    let step = Duration::from_millis(50);
    let mut left = d;
    while !left.is_zero() && cond() {
        let s = left.min(step);
        thread::sleep(s);
        left -= s;
    }
}

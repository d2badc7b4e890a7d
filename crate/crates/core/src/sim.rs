//! Deterministic cluster simulator.
//!
//! Drives the real [`Master`] with a virtual clock. Nodes follow scripted
//! resource traces, jobs arrive on a schedule and occupy their node for a
//! fixed service time. No processes, sockets or randomness are involved.
//!
//! Scenario files are plain text, one record per line:
//!
//! ```text
//! NODE <id> <ip> <cores> <mem_bytes>
//! TRACE <id> <at_ms> <acr_milli> <amr_bytes>
//! JOB <at_ms> <user> <workdir> <service_ms> <command...>
//! HORIZON <ms>
//! CONFIG <heartbeat_ms|stale_ms|penalty> <value>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use thiserror::Error;

use crate::ledger::{LedgerEvent, MemLedger};
use crate::master::{ConnId, Master};
use crate::model::{Config, JobId, JobRecord, JobSpec, JobState, NodeId, NodeStatic, MILLI_SCALE};
use crate::protocol::Message;
use crate::registry::NodeRecord;
use crate::scheduler::DispatchDecision;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracePoint {
    pub at: u64,
    pub acr_milli: u16,
    pub amr_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimNode {
    pub static_info: NodeStatic,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub at: u64,
    pub spec: JobSpec,
    pub service_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub nodes: Vec<SimNode>,
    pub arrivals: Vec<Arrival>,
    pub horizon_ms: u64,
    pub cfg: Config,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if let Err(e) = self.cfg.validate() {
            return bad(e.to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(&n.static_info.id) {
                return bad(format!("duplicate node {}", n.static_info.id));
            }
            if n.trace.windows(2).any(|w| w[0].at > w[1].at) {
                return bad(format!("trace of {} is not sorted", n.static_info.id));
            }
            if let Some(p) = n.trace.iter().find(|p| p.at >= self.horizon_ms) {
                return bad(format!("trace point at {} is past the horizon", p.at));
            }
            if n.trace.iter().any(|p| p.acr_milli > MILLI_SCALE) {
                return bad(format!("trace of {} has acr above 1000", n.static_info.id));
            }
        }
        if self.arrivals.windows(2).any(|w| w[0].at > w[1].at) {
            return bad("arrivals are not sorted".into());
        }
        if let Some(a) = self.arrivals.iter().find(|a| a.at >= self.horizon_ms) {
            return bad(format!("arrival at {} is past the horizon", a.at));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, SimError> {
        let mut nodes: Vec<SimNode> = Vec::new();
        let mut arrivals = Vec::new();
        let mut horizon = None;
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: &str| SimError::Parse {
                line: line_no,
                reason: reason.to_string(),
            };
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let num = |s: Option<&str>| -> Result<u64, SimError> {
                s.and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| err("expected a number"))
            };
            let (kw, body) = line.split_once(' ').unwrap_or((line, ""));
            match kw {
                "NODE" => {
                    let f: Vec<&str> = body.split(' ').collect();
                    if f.len() != 4 {
                        return Err(err("NODE takes 4 fields"));
                    }
                    let cores = num(Some(f[2]))?;
                    let cores = u32::try_from(cores).map_err(|_| err("cores out of range"))?;
                    let st = NodeStatic::new(f[0], f[1], cores, num(Some(f[3]))?)
                        .map_err(|e| err(&e.to_string()))?;
                    nodes.push(SimNode {
                        static_info: st,
                        trace: Vec::new(),
                    });
                }
                "TRACE" => {
                    let f: Vec<&str> = body.split(' ').collect();
                    if f.len() != 4 {
                        return Err(err("TRACE takes 4 fields"));
                    }
                    let node = nodes
                        .iter_mut()
                        .find(|n| n.static_info.id.as_str() == f[0])
                        .ok_or_else(|| err("TRACE for undeclared node"))?;
                    let acr = num(Some(f[2]))?;
                    if acr > u64::from(MILLI_SCALE) {
                        return Err(err("acr above 1000"));
                    }
                    node.trace.push(TracePoint {
                        at: num(Some(f[1]))?,
                        acr_milli: acr as u16,
                        amr_bytes: num(Some(f[3]))?,
                    });
                }
                "JOB" => {
                    let f: Vec<&str> = body.splitn(5, ' ').collect();
                    if f.len() != 5 {
                        return Err(err("JOB takes 5 fields"));
                    }
                    let spec = JobSpec::new(f[1], f[2], f[4]).map_err(|e| err(&e.to_string()))?;
                    arrivals.push(Arrival {
                        at: num(Some(f[0]))?,
                        spec,
                        service_ms: num(Some(f[3]))?,
                    });
                }
                "HORIZON" => horizon = Some(num(Some(body))?),
                "CONFIG" => {
                    let (key, value) = body.split_once(' ').ok_or_else(|| err("CONFIG takes 2 fields"))?;
                    let value = num(Some(value))?;
                    match key {
                        "heartbeat_ms" => cfg.heartbeat_interval_ms = value,
                        "stale_ms" => cfg.stale_after_ms = value,
                        "penalty" => cfg.dispatch_penalty_milli = value,
                        _ => return Err(err("unknown CONFIG key")),
                    }
                }
                _ => return Err(err("unknown record")),
            }
        }
        let horizon_ms = horizon.ok_or_else(|| SimError::InvalidScenario("missing HORIZON".into()))?;
        let s = Scenario {
            nodes,
            arrivals,
            horizon_ms,
            cfg,
        };
        s.validate()?;
        Ok(s)
    }

    /// `n` identical 4-core / 8 GiB workers named
    /// node01.., idle and heartbeating every interval until the horizon.
    pub fn identical_idle(n: usize, horizon_ms: u64, cfg: Config) -> Scenario {
        const MEM: u64 = 8 << 30;
        let nodes = (1..=n)
            .map(|i| SimNode {
                static_info: NodeStatic::new(&format!("node{i:02}"), &format!("192.0.0.{}", i + 1), 4, MEM)
                    .expect("valid node"),
                trace: (0..horizon_ms)
                    .step_by(cfg.heartbeat_interval_ms as usize)
                    .map(|at| TracePoint {
                        at,
                        acr_milli: MILLI_SCALE,
                        amr_bytes: MEM,
                    })
                    .collect(),
            })
            .collect();
        Scenario {
            nodes,
            arrivals: Vec::new(),
            horizon_ms,
            cfg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchEntry {
    pub at: u64,
    pub job_id: JobId,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchLog {
    pub dispatches: Vec<DispatchEntry>,
    pub jobs: BTreeMap<JobId, JobRecord>,
    /// Every scenario node, in id order.
    pub nodes: Vec<NodeId>,
    pub ledger: Vec<LedgerEvent>,
}

impl fmt::Display for DispatchLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.dispatches {
            writeln!(f, "{} {} {}", d.at, d.job_id, d.node)?;
        }
        Ok(())
    }
}

impl DispatchLog {
    pub fn ledger_text(&self) -> String {
        self.ledger.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn count_in(&self, state: JobState) -> usize {
        self.jobs.values().filter(|r| r.state == state).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventClass {
    Completion,
    Heartbeat,
    Arrival,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Completion { node: usize, job_id: JobId },
    Heartbeat { node: usize, point: usize },
    Arrival { index: usize },
}

const CLIENT: ConnId = ConnId(0);

fn agent_conn(node: usize) -> ConnId {
    ConnId(node as u64 + 1)
}

/// Runs a scenario to its horizon.
pub fn run(s: &Scenario) -> Result<DispatchLog, SimError> {
    run_observed(s, |_, _| {})
}

/// Like [`run`], reporting each dispatch decision together with the
/// candidate set it was chosen from.
pub fn run_observed<F>(s: &Scenario, mut observe: F) -> Result<DispatchLog, SimError>
where
    F: FnMut(&[NodeRecord], &DispatchDecision),
{
    s.validate()?;
    let mut master = Master::new(s.cfg.clone(), MemLedger::new());
    let mut nodes: Vec<&SimNode> = s.nodes.iter().collect();
    nodes.sort_by(|a, b| a.static_info.id.cmp(&b.static_info.id));

    let mut queue: BinaryHeap<Reverse<(u64, EventClass, u64, Event)>> = BinaryHeap::new();
    let mut inserted = 0u64;
    let mut push = |queue: &mut BinaryHeap<_>, at: u64, class: EventClass, ev: Event| {
        queue.push(Reverse((at, class, inserted, ev)));
        inserted += 1;
    };
    for (i, n) in nodes.iter().enumerate() {
        for (p, point) in n.trace.iter().enumerate() {
            push(&mut queue, point.at, EventClass::Heartbeat, Event::Heartbeat { node: i, point: p });
        }
    }
    for (index, a) in s.arrivals.iter().enumerate() {
        push(&mut queue, a.at, EventClass::Arrival, Event::Arrival { index });
    }

    let mut in_service = vec![0u32; nodes.len()];
    let mut service_of: BTreeMap<JobId, u64> = BTreeMap::new();
    let mut dispatches = Vec::new();

    let ledger_fail = |e: crate::master::MasterError| SimError::InvalidScenario(e.to_string());
    for (i, n) in nodes.iter().enumerate() {
        master
            .process_observed(agent_conn(i), Message::Register(n.static_info.clone()), 0, &mut observe)
            .map_err(ledger_fail)?;
    }

    while let Some(Reverse((now, _, _, ev))) = queue.pop() {
        if now >= s.horizon_ms {
            break;
        }
        let (from, msg, pending_service) = match ev {
            Event::Heartbeat { node, point } => {
                let p = &nodes[node].trace[point];
                let msg = Message::Heartbeat {
                    node: nodes[node].static_info.id.clone(),
                    acr_milli: p.acr_milli,
                    amr_bytes: p.amr_bytes,
                    running_jobs: in_service[node],
                };
                (agent_conn(node), msg, None)
            }
            Event::Arrival { index } => {
                let a = &s.arrivals[index];
                (CLIENT, Message::Submit(a.spec.clone()), Some(a.service_ms))
            }
            Event::Completion { node, job_id } => {
                in_service[node] -= 1;
                let msg = Message::JobDone {
                    node: nodes[node].static_info.id.clone(),
                    job_id,
                    exit_code: 0,
                };
                (agent_conn(node), msg, None)
            }
        };
        let out = master
            .process_observed(from, msg, now, &mut observe)
            .map_err(ledger_fail)?;
        for o in out {
            match o.msg {
                Message::JobId(id) => {
                    service_of.insert(id, pending_service.expect("JOBID only answers SUBMIT"));
                }
                Message::Dispatch { job_id, .. } => {
                    let node = (o.to.0 - 1) as usize;
                    in_service[node] += 1;
                    dispatches.push(DispatchEntry {
                        at: now,
                        job_id,
                        node: nodes[node].static_info.id.clone(),
                    });
                    push(
                        &mut queue,
                        now.saturating_add(service_of[&job_id]),
                        EventClass::Completion,
                        Event::Completion { node, job_id },
                    );
                }
                _ => {}
            }
        }
    }

    Ok(DispatchLog {
        dispatches,
        jobs: master.jobs().clone(),
        nodes: nodes.iter().map(|n| n.static_info.id.clone()).collect(),
        ledger: master.ledger().events.clone(),
    })
}

/// Reference selection used to check the scheduler: scores every candidate
/// from first principles, sorts the whole list, and takes the head.
pub fn oracle_select(candidates: &[NodeRecord], cfg: &Config) -> Option<NodeId> {
    let mut ranked: Vec<(i128, u128, &NodeId)> = candidates
        .iter()
        .map(|r| {
            let acr = i128::from(r.last.acr_milli);
            let total = i128::from(r.static_info.total_mem_bytes);
            let amr = i128::from(r.last.amr_bytes).min(total);
            // floor(1000 * amr / total), then floor of the mean
            let mem_milli = (1000 * amr).div_euclid(total);
            let base = (acr + mem_milli).div_euclid(2);
            let penalised = base - i128::from(cfg.dispatch_penalty_milli) * i128::from(r.in_flight);
            let eff = if penalised < 0 { 0 } else { penalised };
            let load = u128::from(r.last.running_jobs) + u128::from(r.in_flight);
            (-eff, load, r.id())
        })
        .collect();
    ranked.sort();
    ranked.first().map(|(_, _, id)| (*id).clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    pub counts: BTreeMap<NodeId, usize>,
    pub spread: usize,
}

impl fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (node, n) in &self.counts {
            writeln!(f, "balance {node} {n}")?;
        }
        writeln!(f, "spread {}", self.spread)
    }
}

/// Dispatches per node (zero for idle nodes) and the max - min spread.
pub fn balance_report(log: &DispatchLog) -> BalanceReport {
    let mut counts: BTreeMap<NodeId, usize> = log.nodes.iter().map(|n| (n.clone(), 0)).collect();
    for d in &log.dispatches {
        *counts.entry(d.node.clone()).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let min = counts.values().copied().min().unwrap_or(0);
    BalanceReport {
        counts,
        spread: max - min,
    }
}

//! Master-side state machine: node registry, job table, pending queue and the
//! ledger, driven one message at a time.
//!
//! Nothing in here touches sockets. The daemon and the simulator both feed
//! decoded messages to [`Master::process`] and deliver the returned
//! [`Outbound`] messages themselves. Ledger events are appended before the
//! state change they describe and before any message that depends on them is
//! returned, so a `DISPATCH` never leaves without its `ASSIGN` on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use thiserror::Error;

use crate::ledger::{EventKind, LedgerEvent, LedgerSink, Replay};
use crate::model::{Config, IdCounter, JobId, JobRecord, JobState, NodeId, ResourceSnapshot};
use crate::protocol::{Message, StateRow};
use crate::registry::{NodeRecord, Registry};
use crate::scheduler::{self, DispatchDecision, PendingQueue};

/// Identifies one peer connection (agent or client).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: ConnId,
    pub msg: Message,
}

#[derive(Debug, Error)]
pub enum MasterError {
    #[error("ledger write failed: {0}")]
    Ledger(#[from] io::Error),
}

pub const ERR_UNKNOWN_NODE: &str = "unknown-node";
pub const ERR_UNKNOWN_JOB: &str = "unknown-job";
pub const ERR_BAD_REQUEST: &str = "bad-request";
pub const FAIL_UNREACHABLE: &str = "unreachable";

pub struct Master<L> {
    cfg: Config,
    registry: Registry,
    queue: PendingQueue,
    jobs: BTreeMap<JobId, JobRecord>,
    ids: IdCounter,
    seq: u64,
    agents: BTreeMap<NodeId, ConnId>,
    ledger: L,
}

impl<L: LedgerSink> Master<L> {
    pub fn new(cfg: Config, ledger: L) -> Self {
        Master {
            cfg,
            registry: Registry::new(),
            queue: PendingQueue::new(),
            jobs: BTreeMap::new(),
            ids: IdCounter::new(),
            seq: 0,
            agents: BTreeMap::new(),
            ledger,
        }
    }

    /// Resumes from a replayed ledger. Jobs the replay marked LOST get their
    /// LOST event written now so later replays agree. The registry starts
    /// empty; agents re-register.
    pub fn recover(cfg: Config, mut ledger: L, replay: Replay, now: u64) -> Result<Self, MasterError> {
        for (job_id, node) in &replay.lost {
            ledger.append(&LedgerEvent {
                ts: now,
                job_id: *job_id,
                kind: EventKind::Lost(node.clone()),
            })?;
        }
        let mut queue = PendingQueue::new();
        for rec in replay.jobs.values().filter(|r| r.state == JobState::Queued) {
            queue.push(rec);
        }
        Ok(Master {
            cfg,
            registry: Registry::new(),
            queue,
            jobs: replay.jobs,
            ids: IdCounter::resume_after(replay.max_job_id),
            seq: replay.last_seq,
            agents: BTreeMap::new(),
            ledger,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn jobs(&self) -> &BTreeMap<JobId, JobRecord> {
        &self.jobs
    }

    pub fn queue(&self) -> &PendingQueue {
        &self.queue
    }

    pub fn ledger(&self) -> &L {
        &self.ledger
    }

    pub fn agent_conn(&self, node: &NodeId) -> Option<ConnId> {
        self.agents.get(node).copied()
    }

    /// Handles one message and then, for messages that can unblock the queue
    /// (REGISTER, HEARTBEAT, SUBMIT), runs a dispatch pass.
    pub fn process(&mut self, from: ConnId, msg: Message, now: u64) -> Result<Vec<Outbound>, MasterError> {
        self.process_observed(from, msg, now, |_, _| {})
    }

    pub fn process_observed<F>(
        &mut self,
        from: ConnId,
        msg: Message,
        now: u64,
        observe: F,
    ) -> Result<Vec<Outbound>, MasterError>
    where
        F: FnMut(&[NodeRecord], &DispatchDecision),
    {
        let triggers_tick = matches!(msg, Message::Register(_) | Message::Heartbeat { .. } | Message::Submit(_));
        let mut out = self.on_message(from, msg, now)?;
        if triggers_tick {
            out.extend(self.tick_observed(now, observe)?);
        }
        Ok(out)
    }

    /// Applies one message and returns the replies. Never dispatches.
    pub fn on_message(&mut self, from: ConnId, msg: Message, now: u64) -> Result<Vec<Outbound>, MasterError> {
        let reply = |msg| vec![Outbound { to: from, msg }];
        let out = match msg {
            Message::Register(s) => {
                if let Some(old) = self.agents.get(&s.id).copied() {
                    if old != from {
                        self.on_agent_disconnect(&s.id, now)?;
                    }
                }
                self.agents.retain(|_, c| *c != from);
                self.agents.insert(s.id.clone(), from);
                self.registry.register(s, now);
                reply(Message::Ok)
            }
            Message::Heartbeat {
                node,
                acr_milli,
                amr_bytes,
                running_jobs,
            } => {
                let snap = ResourceSnapshot {
                    acr_milli,
                    amr_bytes,
                    running_jobs,
                    taken_at: now,
                };
                match self.registry.heartbeat(&node, snap, now) {
                    Ok(()) => reply(Message::Ok),
                    Err(e) => reply(Message::err(ERR_UNKNOWN_NODE, e.to_string())),
                }
            }
            Message::JobDone { node, job_id, exit_code } => {
                let Some(rec) = self.jobs.get(&job_id) else {
                    return Ok(reply(Message::err(ERR_UNKNOWN_JOB, format!("no job {job_id}"))));
                };
                if rec.state != JobState::Dispatched || rec.assigned.as_ref() != Some(&node) {
                    return Ok(reply(Message::err(
                        ERR_BAD_REQUEST,
                        format!("job {job_id} is {} and not running on {node}", rec.state),
                    )));
                }
                let next = rec.clone().finished(exit_code).expect("checked DISPATCHED above");
                self.ledger.append(&LedgerEvent {
                    ts: now,
                    job_id,
                    kind: EventKind::Done(exit_code),
                })?;
                self.jobs.insert(job_id, next);
                reply(Message::Ok)
            }
            Message::Submit(spec) => {
                let job_id = self.ids.next_id();
                self.seq += 1;
                self.ledger.append(&LedgerEvent {
                    ts: now,
                    job_id,
                    kind: EventKind::Submit(spec.clone()),
                })?;
                let rec = JobRecord::queued(job_id, spec, now, self.seq);
                self.queue.push(&rec);
                self.jobs.insert(job_id, rec);
                reply(Message::JobId(job_id))
            }
            Message::Status(job_id) => match self.jobs.get(&job_id) {
                Some(rec) => reply(Message::State(state_row(rec))),
                None => reply(Message::err(ERR_UNKNOWN_JOB, format!("no job {job_id}"))),
            },
            Message::Nodes => self
                .registry
                .table_rows(now, &self.cfg)
                .into_iter()
                .map(Message::Node)
                .chain(std::iter::once(Message::Ok))
                .map(|msg| Outbound { to: from, msg })
                .collect(),
            Message::Jobs => self
                .jobs
                .values()
                .map(|r| Message::State(state_row(r)))
                .chain(std::iter::once(Message::Ok))
                .map(|msg| Outbound { to: from, msg })
                .collect(),
            // acknowledgements from peers need no answer
            Message::Ok | Message::Err { .. } => Vec::new(),
            other => reply(Message::err(
                ERR_BAD_REQUEST,
                format!("{} is not a request", other.keyword()),
            )),
        };
        Ok(out)
    }

    /// One dispatch pass over the pending queue.
    pub fn tick(&mut self, now: u64) -> Result<Vec<Outbound>, MasterError> {
        self.tick_observed(now, |_, _| {})
    }

    pub fn tick_observed<F>(&mut self, now: u64, observe: F) -> Result<Vec<Outbound>, MasterError>
    where
        F: FnMut(&[NodeRecord], &DispatchDecision),
    {
        let decisions = scheduler::drain_observed(&mut self.queue, &mut self.registry, now, &self.cfg, observe);
        let mut out = Vec::with_capacity(decisions.len());
        for d in decisions {
            let rec = self.jobs[&d.job_id].clone();
            match self.agents.get(&d.node).copied() {
                Some(conn) => {
                    self.ledger.append(&LedgerEvent {
                        ts: now,
                        job_id: d.job_id,
                        kind: EventKind::Assign(d.node.clone()),
                    })?;
                    let spec = rec.spec.clone();
                    let next = rec.dispatched_to(d.node).expect("queued job can be dispatched");
                    self.jobs.insert(d.job_id, next);
                    out.push(Outbound {
                        to: conn,
                        msg: Message::Dispatch { job_id: d.job_id, spec },
                    });
                }
                None => {
                    self.ledger.append(&LedgerEvent {
                        ts: now,
                        job_id: d.job_id,
                        kind: EventKind::Fail(FAIL_UNREACHABLE.to_string()),
                    })?;
                    self.jobs
                        .insert(d.job_id, rec.rejected().expect("queued job can be rejected"));
                }
            }
        }
        Ok(out)
    }

    /// A connection closed. If it belonged to an agent, that agent's running
    /// jobs are lost.
    pub fn on_disconnect(&mut self, conn: ConnId, now: u64) -> Result<(), MasterError> {
        let node = self
            .agents
            .iter()
            .find(|(_, c)| **c == conn)
            .map(|(n, _)| n.clone());
        if let Some(node) = node {
            self.on_agent_disconnect(&node, now)?;
        }
        Ok(())
    }

    /// Marks every job running on `node` LOST and forgets its connection. The
    /// node stays registered.
    pub fn on_agent_disconnect(&mut self, node: &NodeId, now: u64) -> Result<(), MasterError> {
        self.agents.remove(node);
        let running: Vec<JobId> = self
            .jobs
            .values()
            .filter(|r| r.state == JobState::Dispatched && r.assigned.as_ref() == Some(node))
            .map(|r| r.job_id)
            .collect();
        for job_id in running {
            self.ledger.append(&LedgerEvent {
                ts: now,
                job_id,
                kind: EventKind::Lost(node.clone()),
            })?;
            let rec = self.jobs[&job_id].clone();
            self.jobs.insert(job_id, rec.lost().expect("DISPATCHED -> LOST is legal"));
        }
        Ok(())
    }

    /// Queue contents equal the set of QUEUED jobs.
    pub fn queue_consistent(&self) -> bool {
        let queued: BTreeSet<JobId> = self
            .jobs
            .values()
            .filter(|r| r.state == JobState::Queued)
            .map(|r| r.job_id)
            .collect();
        let in_queue: BTreeSet<JobId> = self.queue.iter().collect();
        queued == in_queue && in_queue.len() == self.queue.len()
    }
}

pub fn state_row(r: &JobRecord) -> StateRow {
    StateRow {
        job_id: r.job_id,
        state: r.state,
        node: r.assigned.clone(),
        submit_ts: r.submit_ts,
        exit_code: r.exit_code,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{replay, MemLedger};
    use crate::model::{JobSpec, NodeStatic};
    use crate::protocol::decode;

    const GIB: u64 = 1 << 30;
    const CLIENT: ConnId = ConnId(100);

    fn msg(line: &str) -> Message {
        decode(line).unwrap()
    }

    fn master() -> Master<MemLedger> {
        Master::new(Config::default(), MemLedger::new())
    }

    fn register(m: &mut Master<MemLedger>, i: u64, now: u64) {
        let s = NodeStatic::new(&format!("node{i:02}"), &format!("192.0.0.{}", i + 1), 4, 8 * GIB).unwrap();
        m.process(ConnId(i), Message::Register(s), now).unwrap();
        m.process(ConnId(i), msg(&format!("HEARTBEAT node{i:02} 1000 8589934592 0")), now)
            .unwrap();
    }

    fn lines(out: &[Outbound]) -> Vec<String> {
        out.iter().map(|o| format!("{} {}", o.to.0, o.msg)).collect()
    }

    #[test]
    fn submit_assigns_ids_and_logs() {
        let mut m = master();
        let out = m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 10).unwrap();
        assert_eq!(lines(&out), ["100 JOBID 1"]);
        assert_eq!(m.ledger().to_text(), "10 SUBMIT 1 alice /Jugrid/alice root -b\n");
        let out = m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 11).unwrap();
        assert_eq!(lines(&out), ["100 JOBID 2"]);
        assert!(m.queue_consistent());
    }

    #[test]
    fn unknown_job_and_node() {
        let mut m = master();
        let out = m.process(CLIENT, msg("STATUS 999"), 0).unwrap();
        assert!(matches!(&out[0].msg, Message::Err { code, .. } if code == ERR_UNKNOWN_JOB));
        let out = m.process(CLIENT, msg("HEARTBEAT ghost 5 5 0"), 0).unwrap();
        assert!(matches!(&out[0].msg, Message::Err { code, .. } if code == ERR_UNKNOWN_NODE));
        let out = m.process(CLIENT, msg("JOBDONE node01 3 0"), 0).unwrap();
        assert!(matches!(&out[0].msg, Message::Err { code, .. } if code == ERR_UNKNOWN_JOB));
        let out = m.process(CLIENT, msg("JOBID 3"), 0).unwrap();
        assert!(matches!(&out[0].msg, Message::Err { code, .. } if code == ERR_BAD_REQUEST));
        assert!(m.process(CLIENT, Message::Ok, 0).unwrap().is_empty());
    }

    #[test]
    fn dispatch_and_completion() {
        let mut m = master();
        register(&mut m, 1, 0);
        let out = m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 5).unwrap();
        assert_eq!(lines(&out), ["100 JOBID 1", "1 DISPATCH 1 alice /Jugrid/alice root -b"]);
        assert_eq!(m.jobs()[&JobId(1)].state, JobState::Dispatched);

        let out = m.process(ConnId(1), msg("JOBDONE node01 1 0"), 9).unwrap();
        assert_eq!(lines(&out), ["1 OK"]);
        let job = &m.jobs()[&JobId(1)];
        assert_eq!((job.state, job.exit_code), (JobState::Done, Some(0)));

        let out = m.process(CLIENT, msg("STATUS 1"), 9).unwrap();
        assert_eq!(lines(&out), ["100 STATE 1 DONE node01 5 0"]);

        // a second completion for the same job is refused
        let out = m.process(ConnId(1), msg("JOBDONE node01 1 0"), 9).unwrap();
        assert!(matches!(&out[0].msg, Message::Err { code, .. } if code == ERR_BAD_REQUEST));

        assert_eq!(
            m.ledger().to_text(),
            "5 SUBMIT 1 alice /Jugrid/alice root -b\n5 ASSIGN 1 node01\n9 DONE 1 0\n"
        );
    }

    #[test]
    fn nonzero_exit_fails_job() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice false"), 0).unwrap();
        m.process(ConnId(1), msg("JOBDONE node01 1 3"), 1).unwrap();
        let job = &m.jobs()[&JobId(1)];
        assert_eq!((job.state, job.exit_code), (JobState::Failed, Some(3)));
    }

    #[test]
    fn tick_without_nodes_keeps_queue() {
        let mut m = master();
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 0).unwrap();
        assert!(m.tick(1).unwrap().is_empty());
        assert_eq!(m.queue().len(), 1);
        assert!(m.queue_consistent());
    }

    #[test]
    fn tick_cycles_three_identical_nodes() {
        let mut m = master();
        for i in 0..6 {
            m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), i).unwrap();
        }
        for i in 1..=3 {
            let s = NodeStatic::new(&format!("node{i:02}"), "192.0.0.2", 4, 8 * GIB).unwrap();
            m.on_message(ConnId(i), Message::Register(s), 10).unwrap();
            m.on_message(ConnId(i), msg(&format!("HEARTBEAT node{i:02} 1000 8589934592 0")), 10)
                .unwrap();
        }
        let out = m.tick(10).unwrap();
        let targets: Vec<u64> = out.iter().map(|o| o.to.0).collect();
        assert_eq!(targets, [1, 2, 3, 1, 2, 3]);
        assert!(m.queue().is_empty());
    }

    #[test]
    fn missing_connection_fails_job() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.on_disconnect(ConnId(1), 1).unwrap();
        let out = m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 2).unwrap();
        assert_eq!(lines(&out), ["100 JOBID 1"]);
        assert_eq!(m.jobs()[&JobId(1)].state, JobState::Failed);
        assert!(m.ledger().to_text().ends_with("2 FAIL 1 unreachable\n"));
    }

    #[test]
    fn disconnect_loses_running_jobs_only() {
        let mut m = master();
        register(&mut m, 1, 0);
        register(&mut m, 2, 0);
        for _ in 0..4 {
            m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 1).unwrap();
        }
        // jobs 1,3 on node01; 2,4 on node02
        m.process(ConnId(1), msg("JOBDONE node01 1 0"), 2).unwrap();
        m.on_disconnect(ConnId(1), 3).unwrap();
        let states: Vec<JobState> = m.jobs().values().map(|r| r.state).collect();
        assert_eq!(
            states,
            [JobState::Done, JobState::Dispatched, JobState::Lost, JobState::Dispatched]
        );
        m.on_disconnect(ConnId(2), 4).unwrap();
        assert_eq!(m.jobs()[&JobId(2)].state, JobState::Lost);
        // a node with nothing running loses nothing
        m.on_disconnect(ConnId(2), 5).unwrap();
        assert_eq!(m.registry().len(), 2);
    }

    #[test]
    fn re_register_on_new_connection_drops_old_session() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 1).unwrap();
        let s = NodeStatic::new("node01", "192.0.0.2", 4, 8 * GIB).unwrap();
        m.process(ConnId(7), Message::Register(s), 2).unwrap();
        assert_eq!(m.jobs()[&JobId(1)].state, JobState::Lost);
        assert_eq!(m.agent_conn(&NodeId::new("node01").unwrap()), Some(ConnId(7)));
        // the stale connection closing afterwards changes nothing
        m.on_disconnect(ConnId(1), 3).unwrap();
        assert_eq!(m.agent_conn(&NodeId::new("node01").unwrap()), Some(ConnId(7)));
    }

    #[test]
    fn queries_do_not_mutate() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice root -b"), 1).unwrap();
        let before = (m.jobs().clone(), m.ledger().events.len(), m.registry().get(&NodeId::new("node01").unwrap()).cloned());
        let out = m.process(CLIENT, Message::Nodes, 500).unwrap();
        assert_eq!(lines(&out), ["100 NODE node01 192.0.0.2 1000 8589934592 0 500 yes", "100 OK"]);
        let out = m.process(CLIENT, Message::Jobs, 500).unwrap();
        assert_eq!(lines(&out), ["100 STATE 1 DISPATCHED node01 1 -", "100 OK"]);
        m.process(CLIENT, Message::Status(JobId(1)), 500).unwrap();
        let after = (m.jobs().clone(), m.ledger().events.len(), m.registry().get(&NodeId::new("node01").unwrap()).cloned());
        assert_eq!(before, after);
    }

    #[test]
    fn empty_listings_are_well_formed() {
        let mut m = master();
        assert_eq!(lines(&m.process(CLIENT, Message::Nodes, 0).unwrap()), ["100 OK"]);
        assert_eq!(lines(&m.process(CLIENT, Message::Jobs, 0).unwrap()), ["100 OK"]);
    }

    #[test]
    fn recover_resumes_ids_and_queue() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice a"), 1).unwrap();
        m.on_disconnect(ConnId(1), 2).unwrap();
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice b"), 3).unwrap();
        // job 2 fails as unreachable: node01 is registered but has no connection
        let r = replay(m.ledger().to_text().as_bytes()).unwrap();
        let mut rec = Master::recover(Config::default(), MemLedger::new(), r, 10).unwrap();
        assert_eq!(rec.jobs(), m.jobs());
        let out = rec.process(CLIENT, msg("SUBMIT alice /Jugrid/alice z"), 11).unwrap();
        assert_eq!(lines(&out), ["100 JOBID 3"]);
        assert!(rec.queue_consistent());
    }

    #[test]
    fn recover_writes_lost_events() {
        let mut m = master();
        register(&mut m, 1, 0);
        m.process(CLIENT, msg("SUBMIT alice /Jugrid/alice a"), 1).unwrap();
        let r = replay(m.ledger().to_text().as_bytes()).unwrap();
        let rec = Master::recover(Config::default(), MemLedger::new(), r, 50).unwrap();
        assert_eq!(rec.ledger().to_text(), "50 LOST 1 node01\n");
        assert_eq!(rec.jobs()[&JobId(1)].state, JobState::Lost);
        assert!(rec.registry().is_empty());
    }

    #[test]
    fn every_dispatch_follows_its_assign() {
        let mut m = master();
        register(&mut m, 1, 0);
        register(&mut m, 2, 0);
        let spec = JobSpec::new("alice", "/Jugrid/alice", "x").unwrap();
        for t in 0..20 {
            let before = m.ledger().events.len();
            let out = m.process(CLIENT, Message::Submit(spec.clone()), t).unwrap();
            let new_events = &m.ledger().events[before..];
            for o in &out {
                if let Message::Dispatch { job_id, .. } = &o.msg {
                    assert!(new_events
                        .iter()
                        .any(|e| e.job_id == *job_id && matches!(e.kind, EventKind::Assign(_))));
                }
            }
        }
    }
}

//! Append-only job ledger and crash recovery by replay.
//!
//! ```text
//! <ts> SUBMIT <job_id> <user> <workdir> <command...>
//! <ts> ASSIGN <job_id> <node_id>
//! <ts> DONE <job_id> <exit_code>
//! <ts> FAIL <job_id> <reason>
//! <ts> LOST <job_id> <node_id>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{self, is_token, JobId, JobRecord, JobSpec, JobState, NodeId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Submit(JobSpec),
    Assign(NodeId),
    Done(i32),
    Fail(String),
    Lost(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub ts: u64,
    pub job_id: JobId,
    pub kind: EventKind,
}

impl fmt::Display for LedgerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (ts, id) = (self.ts, self.job_id);
        match &self.kind {
            EventKind::Submit(s) => write!(f, "{ts} SUBMIT {id} {} {} {}", s.user, s.workdir, s.command),
            EventKind::Assign(n) => write!(f, "{ts} ASSIGN {id} {n}"),
            EventKind::Done(code) => write!(f, "{ts} DONE {id} {code}"),
            EventKind::Fail(reason) => write!(f, "{ts} FAIL {id} {reason}"),
            EventKind::Lost(n) => write!(f, "{ts} LOST {id} {n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed ledger line")]
pub struct ParseEventError;

impl LedgerEvent {
    pub fn parse(line: &str) -> Result<Self, ParseEventError> {
        let mut head = line.splitn(4, ' ');
        let (Some(ts), Some(kind), Some(id), Some(rest)) = (head.next(), head.next(), head.next(), head.next())
        else {
            return Err(ParseEventError);
        };
        let ts = canonical_u64(ts).ok_or(ParseEventError)?;
        let job_id = match canonical_u64(id) {
            Some(n) if n > 0 => JobId(n),
            _ => return Err(ParseEventError),
        };
        let kind = match kind {
            "SUBMIT" => {
                let mut p = rest.splitn(3, ' ');
                let (Some(user), Some(workdir), Some(command)) = (p.next(), p.next(), p.next()) else {
                    return Err(ParseEventError);
                };
                EventKind::Submit(JobSpec::new(user, workdir, command).map_err(|_| ParseEventError)?)
            }
            "ASSIGN" => EventKind::Assign(single(rest).and_then(|s| NodeId::new(s).ok()).ok_or(ParseEventError)?),
            "LOST" => EventKind::Lost(single(rest).and_then(|s| NodeId::new(s).ok()).ok_or(ParseEventError)?),
            "DONE" => {
                let code = single(rest).and_then(canonical_i32).ok_or(ParseEventError)?;
                EventKind::Done(code)
            }
            "FAIL" => {
                let reason = single(rest).filter(|s| is_token(s)).ok_or(ParseEventError)?;
                EventKind::Fail(reason.to_string())
            }
            _ => return Err(ParseEventError),
        };
        Ok(LedgerEvent { ts, job_id, kind })
    }
}

fn single(s: &str) -> Option<&str> {
    if s.contains(' ') {
        None
    } else {
        Some(s)
    }
}

fn canonical_u64(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

fn canonical_i32(s: &str) -> Option<i32> {
    match s.strip_prefix('-') {
        Some(m) => match canonical_u64(m)? {
            0 => None,
            m => 0i64.checked_sub(m as i64)?.try_into().ok(),
        },
        None => canonical_u64(s)?.try_into().ok(),
    }
}

/// Where the master writes its events. Each append must be durable in the
/// sink's own sense before it returns.
pub trait LedgerSink {
    fn append(&mut self, ev: &LedgerEvent) -> io::Result<()>;
}

/// In-memory ledger for the simulator and tests.
#[derive(Debug, Clone, Default)]
pub struct MemLedger {
    pub events: Vec<LedgerEvent>,
}

impl MemLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_text(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

impl LedgerSink for MemLedger {
    fn append(&mut self, ev: &LedgerEvent) -> io::Result<()> {
        self.events.push(ev.clone());
        Ok(())
    }
}

impl<L: LedgerSink + ?Sized> LedgerSink for &mut L {
    fn append(&mut self, ev: &LedgerEvent) -> io::Result<()> {
        (**self).append(ev)
    }
}

/// File-backed ledger; every event is written and flushed on its own.
#[derive(Debug)]
pub struct FileLedger {
    file: File,
}

impl FileLedger {
    /// Opens (creating if needed) and replays `path`. A torn or malformed
    /// tail is cut off so new events start on a clean line.
    pub fn open(path: &Path) -> Result<(FileLedger, Replay), LedgerError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let replay = replay(&bytes)?;
        if replay.valid_len < bytes.len() {
            file.set_len(replay.valid_len as u64)?;
        }
        Ok((FileLedger { file }, replay))
    }
}

impl LedgerSink for FileLedger {
    fn append(&mut self, ev: &LedgerEvent) -> io::Result<()> {
        let line = format!("{ev}\n");
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.file.sync_data()
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    /// 1-based line number.
    #[error("corrupt ledger at line {0}")]
    CorruptLedger(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Job table rebuilt from a ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Replay {
    pub jobs: BTreeMap<JobId, JobRecord>,
    pub max_job_id: u64,
    /// Jobs that were still running when the log ended, now marked LOST.
    pub lost: Vec<(JobId, NodeId)>,
    /// Number of submissions seen, i.e. the last sequence number used.
    pub last_seq: u64,
    /// Bytes of the input that form complete, valid events.
    pub valid_len: usize,
}

/// Rebuilds the job table. An unterminated final line, or a malformed last
/// line, is ignored; anything malformed earlier is an error.
pub fn replay(bytes: &[u8]) -> Result<Replay, LedgerError> {
    let mut out = Replay::default();
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(p) => &bytes[..=p],
        None => &[][..],
    };
    let lines: Vec<&[u8]> = complete.split_inclusive(|&b| b == b'\n').collect();
    let mut offset = 0;
    for (i, raw) in lines.iter().enumerate() {
        let is_last = i + 1 == lines.len();
        let applied = std::str::from_utf8(&raw[..raw.len() - 1])
            .ok()
            .and_then(|l| LedgerEvent::parse(l).ok())
            .and_then(|ev| apply(&mut out, ev).ok());
        match applied {
            Some(()) => offset += raw.len(),
            None if is_last => break,
            None => return Err(LedgerError::CorruptLedger(i + 1)),
        }
    }
    out.valid_len = offset;
    for rec in out.jobs.values_mut() {
        if rec.state == JobState::Dispatched {
            let node = rec.assigned.clone().expect("dispatched job has a node");
            *rec = rec.clone().lost().expect("DISPATCHED -> LOST is legal");
            out.lost.push((rec.job_id, node));
        }
    }
    Ok(out)
}

fn apply(out: &mut Replay, ev: LedgerEvent) -> Result<(), model::ModelError> {
    let bad = || model::ModelError::BadConfig("event out of lifecycle order");
    if let EventKind::Submit(spec) = ev.kind {
        if out.jobs.contains_key(&ev.job_id) {
            return Err(bad());
        }
        out.last_seq += 1;
        out.max_job_id = out.max_job_id.max(ev.job_id.0);
        out.jobs
            .insert(ev.job_id, JobRecord::queued(ev.job_id, spec, ev.ts, out.last_seq));
        return Ok(());
    }
    let rec = out.jobs.get(&ev.job_id).cloned().ok_or_else(bad)?;
    let next = match ev.kind {
        EventKind::Submit(_) => unreachable!(),
        EventKind::Assign(node) => rec.dispatched_to(node)?,
        EventKind::Done(code) => rec.finished(code)?,
        EventKind::Fail(_) if rec.state == JobState::Queued => rec.rejected()?,
        EventKind::Fail(_) => rec.transition(JobState::Failed)?,
        EventKind::Lost(_) => rec.lost()?,
    };
    out.jobs.insert(ev.job_id, next);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: u64, id: u64, kind: EventKind) -> String {
        format!("{}\n", LedgerEvent { ts, job_id: JobId(id), kind })
    }

    fn submit(ts: u64, id: u64) -> String {
        ev(ts, id, EventKind::Submit(JobSpec::new("alice", "/Jugrid/alice", "root -b").unwrap()))
    }

    fn node() -> NodeId {
        NodeId::new("node01").unwrap()
    }

    #[test]
    fn line_format() {
        assert_eq!(submit(5, 1), "5 SUBMIT 1 alice /Jugrid/alice root -b\n");
        assert_eq!(ev(6, 1, EventKind::Assign(node())), "6 ASSIGN 1 node01\n");
        assert_eq!(ev(7, 1, EventKind::Done(-2)), "7 DONE 1 -2\n");
        assert_eq!(ev(7, 1, EventKind::Fail("unreachable".into())), "7 FAIL 1 unreachable\n");
        assert_eq!(ev(8, 1, EventKind::Lost(node())), "8 LOST 1 node01\n");
        for line in ["5 SUBMIT 1 alice /Jugrid/alice root -b", "7 DONE 1 -2", "8 LOST 1 node01"] {
            assert_eq!(LedgerEvent::parse(line).unwrap().to_string(), line);
        }
        for bad in ["", "5 SUBMIT 0 a /b c", "x ASSIGN 1 n", "5 ASSIGN 1 a b", "5 DONE 1 07", "5 NOPE 1 x"] {
            assert!(LedgerEvent::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_ledger() {
        let r = replay(b"").unwrap();
        assert!(r.jobs.is_empty());
        assert_eq!(r.max_job_id, 0);
    }

    #[test]
    fn complete_lifecycle() {
        let log = submit(1, 1) + &ev(2, 1, EventKind::Assign(node())) + &ev(3, 1, EventKind::Done(0));
        let r = replay(log.as_bytes()).unwrap();
        let j = &r.jobs[&JobId(1)];
        assert_eq!((j.state, j.exit_code, j.submit_ts), (JobState::Done, Some(0), 1));
        assert!(r.lost.is_empty());
    }

    #[test]
    fn running_at_end_becomes_lost() {
        let log = submit(1, 1) + &ev(2, 1, EventKind::Assign(node()));
        let r = replay(log.as_bytes()).unwrap();
        assert_eq!(r.jobs[&JobId(1)].state, JobState::Lost);
        assert_eq!(r.lost, vec![(JobId(1), node())]);
    }

    #[test]
    fn max_id_and_seq() {
        let log = submit(1, 3) + &submit(1, 41) + &ev(2, 3, EventKind::Fail("unreachable".into()));
        let r = replay(log.as_bytes()).unwrap();
        assert_eq!(r.max_job_id, 41);
        assert_eq!(r.last_seq, 2);
        assert_eq!(r.jobs[&JobId(3)].state, JobState::Failed);
        assert_eq!(r.jobs[&JobId(41)].state, JobState::Queued);
    }

    #[test]
    fn torn_and_corrupt_lines() {
        let good = submit(1, 1);
        let torn = format!("{good}2 ASSIGN 1 no");
        let r = replay(torn.as_bytes()).unwrap();
        assert_eq!(r.jobs[&JobId(1)].state, JobState::Queued);
        assert_eq!(r.valid_len, good.len());

        let bad_tail = format!("{good}garbage\n");
        assert_eq!(replay(bad_tail.as_bytes()).unwrap().valid_len, good.len());

        let bad_middle = format!("garbage\n{good}");
        assert!(matches!(replay(bad_middle.as_bytes()), Err(LedgerError::CorruptLedger(1))));

        let out_of_order = ev(1, 1, EventKind::Done(0)) + &good;
        assert!(matches!(replay(out_of_order.as_bytes()), Err(LedgerError::CorruptLedger(1))));

        let dup = good.clone() + &good + &good;
        assert!(matches!(replay(dup.as_bytes()), Err(LedgerError::CorruptLedger(2))));
    }

    #[test]
    fn file_ledger_truncates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger");
        std::fs::write(&path, format!("{}9 ASS", submit(1, 1))).unwrap();
        let (mut l, r) = FileLedger::open(&path).unwrap();
        assert_eq!(r.jobs.len(), 1);
        l.append(&LedgerEvent {
            ts: 2,
            job_id: JobId(1),
            kind: EventKind::Assign(node()),
        })
        .unwrap();
        drop(l);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{}2 ASSIGN 1 node01\n", submit(1, 1)));
    }
}

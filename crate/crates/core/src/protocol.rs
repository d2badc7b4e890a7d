//! Line-oriented text protocol spoken between agents, clients and the master.
//!
//! One message per line, an uppercase keyword first, fields separated by a
//! single space. Free text (a job command, an error message) is always the
//! last field and runs to the end of the line, so nothing is ever quoted.
//!
//! ```text
//! REGISTER <node_id> <ip> <cpu_cores> <total_mem_bytes>
//! HEARTBEAT <node_id> <acr_milli> <amr_bytes> <running_jobs>
//! JOBDONE <node_id> <job_id> <exit_code>
//! SUBMIT <user> <workdir> <command...>
//! STATUS <job_id>
//! NODES
//! JOBS
//! DISPATCH <job_id> <user> <workdir> <command...>
//! JOBID <job_id>
//! STATE <job_id> <state> <node_id|-> <submit_ts> <exit_code|->
//! NODE <node_id> <ip> <acr_milli> <amr_bytes> <running_jobs> <age_ms> <yes|no>
//! OK
//! ERR <code> <text...>
//! ```

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::model::{self, is_token, JobId, JobSpec, JobState, NodeId, NodeStatic, MILLI_SCALE};

/// Longest accepted line, excluding the terminator.
pub const MAX_LINE: usize = 65536;

/// One row of the `NODES` listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRow {
    pub node: NodeId,
    pub ip: Ipv4Addr,
    pub acr_milli: u16,
    pub amr_bytes: u64,
    pub running_jobs: u32,
    pub age_ms: u64,
    pub eligible: bool,
}

/// One row of a `STATUS`/`JOBS` reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateRow {
    pub job_id: JobId,
    pub state: JobState,
    pub node: Option<NodeId>,
    pub submit_ts: u64,
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Register(NodeStatic),
    Heartbeat {
        node: NodeId,
        acr_milli: u16,
        amr_bytes: u64,
        running_jobs: u32,
    },
    JobDone {
        node: NodeId,
        job_id: JobId,
        exit_code: i32,
    },
    Submit(JobSpec),
    Status(JobId),
    Nodes,
    Jobs,
    Dispatch {
        job_id: JobId,
        spec: JobSpec,
    },
    JobId(JobId),
    State(StateRow),
    Node(NodeRow),
    Ok,
    Err {
        code: String,
        text: String,
    },
}

impl Message {
    /// Builds an `ERR` reply. `code` must be a token and `text` nonempty.
    pub fn err(code: &str, text: impl Into<String>) -> Message {
        debug_assert!(is_token(code));
        let mut text: String = text.into().replace(['\n', '\r'], " ");
        if !model::is_free_text(&text) {
            text = code.to_string();
        }
        Message::Err {
            code: code.to_string(),
            text,
        }
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            Message::Register(_) => "REGISTER",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::JobDone { .. } => "JOBDONE",
            Message::Submit(_) => "SUBMIT",
            Message::Status(_) => "STATUS",
            Message::Nodes => "NODES",
            Message::Jobs => "JOBS",
            Message::Dispatch { .. } => "DISPATCH",
            Message::JobId(_) => "JOBID",
            Message::State(_) => "STATE",
            Message::Node(_) => "NODE",
            Message::Ok => "OK",
            Message::Err { .. } => "ERR",
        }
    }
}

struct Opt<'a, T>(&'a Option<T>);

impl<T: fmt::Display> fmt::Display for Opt<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => v.fmt(f),
            None => f.write_str("-"),
        }
    }
}

/// Canonical form without the trailing newline.
impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kw = self.keyword();
        match self {
            Message::Register(s) => write!(f, "{kw} {} {} {} {}", s.id, s.ip, s.cpu_cores, s.total_mem_bytes),
            Message::Heartbeat {
                node,
                acr_milli,
                amr_bytes,
                running_jobs,
            } => write!(f, "{kw} {node} {acr_milli} {amr_bytes} {running_jobs}"),
            Message::JobDone { node, job_id, exit_code } => write!(f, "{kw} {node} {job_id} {exit_code}"),
            Message::Submit(s) => write!(f, "{kw} {} {} {}", s.user, s.workdir, s.command),
            Message::Status(id) | Message::JobId(id) => write!(f, "{kw} {id}"),
            Message::Nodes | Message::Jobs | Message::Ok => f.write_str(kw),
            Message::Dispatch { job_id, spec } => {
                write!(f, "{kw} {job_id} {} {} {}", spec.user, spec.workdir, spec.command)
            }
            Message::State(r) => write!(
                f,
                "{kw} {} {} {} {} {}",
                r.job_id,
                r.state,
                Opt(&r.node),
                r.submit_ts,
                Opt(&r.exit_code)
            ),
            Message::Node(r) => write!(
                f,
                "{kw} {} {} {} {} {} {} {}",
                r.node,
                r.ip,
                r.acr_milli,
                r.amr_bytes,
                r.running_jobs,
                r.age_ms,
                if r.eligible { "yes" } else { "no" }
            ),
            Message::Err { code, text } => write!(f, "{kw} {code} {text}"),
        }
    }
}

/// Encodes one message as a `\n`-terminated line.
pub fn encode(m: &Message) -> String {
    let mut line = m.to_string();
    line.push('\n');
    line
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("line is not valid UTF-8")]
    NotUtf8,
    #[error("unknown keyword {0:?}")]
    UnknownKeyword(String),
    #[error("{keyword} takes {expected} fields, got {got}")]
    BadArity {
        keyword: &'static str,
        expected: usize,
        got: usize,
    },
    /// Zero-based field position; the keyword is field 0.
    #[error("bad field at position {0}")]
    BadField(usize),
}

/// Fields of one line; positions are reported relative to the keyword.
struct Fields<'a> {
    parts: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    /// `fixed` fields after the keyword, plus one trailing free-text field if `rest`.
    fn split(keyword: &'static str, body: Option<&'a str>, fixed: usize, rest: bool) -> Result<Self, DecodeError> {
        let expected = fixed + usize::from(rest);
        let parts: Vec<&str> = match body {
            None => Vec::new(),
            Some(b) if rest => b.splitn(expected, ' ').collect(),
            Some(b) => b.split(' ').collect(),
        };
        if parts.len() != expected {
            return Err(DecodeError::BadArity {
                keyword,
                expected,
                got: parts.len(),
            });
        }
        Ok(Fields { parts })
    }

    fn raw(&self, i: usize) -> &'a str {
        self.parts[i]
    }

    fn err(&self, i: usize) -> DecodeError {
        DecodeError::BadField(i + 1)
    }

    fn token(&self, i: usize) -> Result<&'a str, DecodeError> {
        let s = self.raw(i);
        if is_token(s) {
            Ok(s)
        } else {
            Err(self.err(i))
        }
    }

    fn node(&self, i: usize) -> Result<NodeId, DecodeError> {
        NodeId::new(self.raw(i)).map_err(|_| self.err(i))
    }

    fn u64(&self, i: usize) -> Result<u64, DecodeError> {
        parse_canonical_u64(self.raw(i)).ok_or_else(|| self.err(i))
    }

    fn u32(&self, i: usize) -> Result<u32, DecodeError> {
        self.u64(i)?.try_into().map_err(|_| self.err(i))
    }

    fn job_id(&self, i: usize) -> Result<JobId, DecodeError> {
        match self.u64(i)? {
            0 => Err(self.err(i)),
            n => Ok(JobId(n)),
        }
    }

    fn acr(&self, i: usize) -> Result<u16, DecodeError> {
        match self.u64(i)? {
            n if n <= u64::from(MILLI_SCALE) => Ok(n as u16),
            _ => Err(self.err(i)),
        }
    }

    fn i32(&self, i: usize) -> Result<i32, DecodeError> {
        parse_canonical_i32(self.raw(i)).ok_or_else(|| self.err(i))
    }

    fn ip(&self, i: usize) -> Result<Ipv4Addr, DecodeError> {
        model::parse_dotted_quad(self.raw(i)).ok_or_else(|| self.err(i))
    }

    fn workdir(&self, i: usize) -> Result<&'a str, DecodeError> {
        let s = self.raw(i);
        if model::is_workdir(s) {
            Ok(s)
        } else {
            Err(self.err(i))
        }
    }

    fn text(&self, i: usize) -> Result<&'a str, DecodeError> {
        let s = self.raw(i);
        if model::is_free_text(s) {
            Ok(s)
        } else {
            Err(self.err(i))
        }
    }

    fn spec(&self, first: usize) -> Result<JobSpec, DecodeError> {
        let user = self.token(first)?;
        let workdir = self.workdir(first + 1)?;
        let command = self.text(first + 2)?;
        Ok(JobSpec {
            user: user.to_string(),
            workdir: workdir.to_string(),
            command: command.to_string(),
        })
    }
}

fn parse_canonical_u64(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

fn parse_canonical_i32(s: &str) -> Option<i32> {
    match s.strip_prefix('-') {
        Some(mag) => {
            let m = parse_canonical_u64(mag)?;
            if m == 0 {
                return None;
            }
            0i64.checked_sub(m as i64)?.try_into().ok()
        }
        None => parse_canonical_u64(s)?.try_into().ok(),
    }
}

/// Decodes raw bytes, rejecting invalid UTF-8.
pub fn decode_bytes(line: &[u8]) -> Result<Message, DecodeError> {
    std::str::from_utf8(line)
        .map_err(|_| DecodeError::NotUtf8)
        .and_then(decode)
}

/// Decodes one line. A trailing `\n` (optionally preceded by `\r`) is ignored.
pub fn decode(line: &str) -> Result<Message, DecodeError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (kw, body) = match line.split_once(' ') {
        Some((k, b)) => (k, Some(b)),
        None => (line, None),
    };
    let m = match kw {
        "REGISTER" => {
            let f = Fields::split("REGISTER", body, 4, false)?;
            let cores = f.u32(2)?;
            if cores == 0 {
                return Err(f.err(2));
            }
            let mem = f.u64(3)?;
            if mem == 0 {
                return Err(f.err(3));
            }
            Message::Register(NodeStatic {
                id: f.node(0)?,
                ip: f.ip(1)?,
                cpu_cores: cores,
                total_mem_bytes: mem,
            })
        }
        "HEARTBEAT" => {
            let f = Fields::split("HEARTBEAT", body, 4, false)?;
            Message::Heartbeat {
                node: f.node(0)?,
                acr_milli: f.acr(1)?,
                amr_bytes: f.u64(2)?,
                running_jobs: f.u32(3)?,
            }
        }
        "JOBDONE" => {
            let f = Fields::split("JOBDONE", body, 3, false)?;
            Message::JobDone {
                node: f.node(0)?,
                job_id: f.job_id(1)?,
                exit_code: f.i32(2)?,
            }
        }
        "SUBMIT" => {
            let f = Fields::split("SUBMIT", body, 2, true)?;
            Message::Submit(f.spec(0)?)
        }
        "STATUS" => {
            let f = Fields::split("STATUS", body, 1, false)?;
            Message::Status(f.job_id(0)?)
        }
        "NODES" => {
            Fields::split("NODES", body, 0, false)?;
            Message::Nodes
        }
        "JOBS" => {
            Fields::split("JOBS", body, 0, false)?;
            Message::Jobs
        }
        "DISPATCH" => {
            let f = Fields::split("DISPATCH", body, 3, true)?;
            Message::Dispatch {
                job_id: f.job_id(0)?,
                spec: f.spec(1)?,
            }
        }
        "JOBID" => {
            let f = Fields::split("JOBID", body, 1, false)?;
            Message::JobId(f.job_id(0)?)
        }
        "STATE" => {
            let f = Fields::split("STATE", body, 5, false)?;
            let job_id = f.job_id(0)?;
            let state = f.raw(1).parse().map_err(|_| f.err(1))?;
            let node = match f.raw(2) {
                "-" => None,
                _ => Some(f.node(2)?),
            };
            let submit_ts = f.u64(3)?;
            let exit_code = match f.raw(4) {
                "-" => None,
                _ => Some(f.i32(4)?),
            };
            Message::State(StateRow {
                job_id,
                state,
                node,
                submit_ts,
                exit_code,
            })
        }
        "NODE" => {
            let f = Fields::split("NODE", body, 7, false)?;
            Message::Node(NodeRow {
                node: f.node(0)?,
                ip: f.ip(1)?,
                acr_milli: f.acr(2)?,
                amr_bytes: f.u64(3)?,
                running_jobs: f.u32(4)?,
                age_ms: f.u64(5)?,
                eligible: match f.raw(6) {
                    "yes" => true,
                    "no" => false,
                    _ => return Err(f.err(6)),
                },
            })
        }
        "OK" => {
            Fields::split("OK", body, 0, false)?;
            Message::Ok
        }
        "ERR" => {
            let f = Fields::split("ERR", body, 1, true)?;
            Message::Err {
                code: f.token(0)?.to_string(),
                text: f.text(1)?.to_string(),
            }
        }
        other => return Err(DecodeError::UnknownKeyword(other.chars().take(32).collect())),
    };
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("line exceeds {MAX_LINE} bytes")]
    LineTooLong,
    #[error("stream ended inside a line")]
    TruncatedFinalLine,
}

/// Splits an incoming byte stream into `\n`-terminated lines.
///
/// Bytes after the last newline are held until more data arrives.
#[derive(Debug, Default)]
pub struct LineFramer {
    pending: Vec<u8>,
}

impl LineFramer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds a chunk and returns every line it completes, terminators removed.
    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<Vec<u8>>, FrameError> {
        let mut out = Vec::new();
        let mut rest = chunk;
        while let Some(pos) = rest.iter().position(|&b| b == b'\n') {
            if self.pending.len() + pos > MAX_LINE {
                return Err(FrameError::LineTooLong);
            }
            let mut line = std::mem::take(&mut self.pending);
            line.extend_from_slice(&rest[..pos]);
            out.push(line);
            rest = &rest[pos + 1..];
        }
        if self.pending.len() + rest.len() > MAX_LINE {
            return Err(FrameError::LineTooLong);
        }
        self.pending.extend_from_slice(rest);
        Ok(out)
    }

    pub fn pending(&self) -> &[u8] {
        &self.pending
    }

    /// Call at end of stream; leftover bytes mean the peer cut a line short.
    pub fn finish(self) -> Result<(), FrameError> {
        if self.pending.is_empty() {
            Ok(())
        } else {
            Err(FrameError::TruncatedFinalLine)
        }
    }
}

/// Frames a complete byte stream in one go.
pub fn read_frames(stream: &[u8]) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut framer = LineFramer::new();
    let lines = framer.push(stream)?;
    framer.finish()?;
    Ok(lines)
}

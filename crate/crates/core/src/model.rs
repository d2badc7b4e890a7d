//! Domain types shared by every other module: node identity, resource
//! snapshots, job specs and the job lifecycle.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

/// Upper bound of the milli-unit availability scale.
pub const MILLI_SCALE: u16 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid node id {0:?}")]
    BadId(String),
    #[error("invalid ip address {0:?}")]
    BadIp(String),
    #[error("cpu_cores must be at least 1")]
    BadCores,
    #[error("total_mem_bytes must be at least 1")]
    BadMem,
    #[error("acr_milli {0} outside 0..=1000")]
    BadAcr(u32),
    #[error("invalid user name {0:?}")]
    BadUser(String),
    #[error("workdir {0:?} is not an absolute path without spaces")]
    BadWorkdir(String),
    #[error("command must be a nonempty single line")]
    BadCommand,
    #[error("illegal job transition {from} -> {to}")]
    IllegalTransition { from: JobState, to: JobState },
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
}

/// True for nonempty strings over `[A-Za-z0-9._-]`.
pub fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Worker identity, e.g. `node01`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        // "-" marks an absent node in STATE rows
        if is_token(&id) && id != "-" {
            Ok(NodeId(id))
        } else {
            Err(ModelError::BadId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NodeId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

/// Static description of a worker as sent in `REGISTER`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStatic {
    pub id: NodeId,
    pub ip: Ipv4Addr,
    pub cpu_cores: u32,
    pub total_mem_bytes: u64,
}

impl NodeStatic {
    /// Validates raw fields in declaration order and reports the first bad one.
    pub fn new(id: &str, ip: &str, cpu_cores: u32, total_mem_bytes: u64) -> Result<Self, ModelError> {
        let id = NodeId::new(id)?;
        let ip = parse_dotted_quad(ip).ok_or_else(|| ModelError::BadIp(ip.to_string()))?;
        if cpu_cores < 1 {
            return Err(ModelError::BadCores);
        }
        if total_mem_bytes < 1 {
            return Err(ModelError::BadMem);
        }
        Ok(NodeStatic {
            id,
            ip,
            cpu_cores,
            total_mem_bytes,
        })
    }
}

/// Four decimal octets in 0..=255, no leading zeros, no surrounding junk.
pub fn parse_dotted_quad(s: &str) -> Option<Ipv4Addr> {
    let mut octets = [0u8; 4];
    let mut parts = s.split('.');
    for slot in octets.iter_mut() {
        let part = parts.next()?;
        if part.is_empty()
            || part.len() > 3
            || !part.bytes().all(|b| b.is_ascii_digit())
            || (part.len() > 1 && part.starts_with('0'))
        {
            return None;
        }
        *slot = part.parse().ok()?;
    }
    if parts.next().is_some() {
        return None;
    }
    Some(Ipv4Addr::from(octets))
}

/// One ACR/AMR measurement reported by a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResourceSnapshot {
    /// Idle CPU capacity in thousandths (0..=1000).
    pub acr_milli: u16,
    /// Available memory in bytes.
    pub amr_bytes: u64,
    pub running_jobs: u32,
    pub taken_at: u64,
}

impl ResourceSnapshot {
    pub fn new(acr_milli: u32, amr_bytes: u64, running_jobs: u32, taken_at: u64) -> Result<Self, ModelError> {
        if acr_milli > u32::from(MILLI_SCALE) {
            return Err(ModelError::BadAcr(acr_milli));
        }
        Ok(ResourceSnapshot {
            acr_milli: acr_milli as u16,
            amr_bytes,
            running_jobs,
            taken_at,
        })
    }
}

/// What a user asked to run, and where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub user: String,
    pub workdir: String,
    pub command: String,
}

impl JobSpec {
    pub fn new(
        user: impl Into<String>,
        workdir: impl Into<String>,
        command: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let (user, workdir, command) = (user.into(), workdir.into(), command.into());
        if !is_token(&user) {
            return Err(ModelError::BadUser(user));
        }
        if !is_workdir(&workdir) {
            return Err(ModelError::BadWorkdir(workdir));
        }
        if !is_free_text(&command) {
            return Err(ModelError::BadCommand);
        }
        Ok(JobSpec { user, workdir, command })
    }
}

pub(crate) fn is_workdir(s: &str) -> bool {
    s.starts_with('/') && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Rest-of-line fields: at least one visible character, no line breaks.
pub(crate) fn is_free_text(s: &str) -> bool {
    s.chars().any(|c| !c.is_whitespace()) && !s.chars().any(|c| c == '\n' || c == '\r')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobState {
    Queued,
    Dispatched,
    Done,
    Failed,
    Lost,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Queued,
        JobState::Dispatched,
        JobState::Done,
        JobState::Failed,
        JobState::Lost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "QUEUED",
            JobState::Dispatched => "DISPATCHED",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
            JobState::Lost => "LOST",
        }
    }

    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Queued, Dispatched) | (Queued, Failed) | (Dispatched, Done) | (Dispatched, Failed) | (Dispatched, Lost)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Lost)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL.into_iter().find(|st| st.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub job_id: JobId,
    pub spec: JobSpec,
    pub submit_ts: u64,
    pub seq: u64,
    pub state: JobState,
    pub assigned: Option<NodeId>,
    pub exit_code: Option<i32>,
}

impl JobRecord {
    pub fn queued(job_id: JobId, spec: JobSpec, submit_ts: u64, seq: u64) -> Self {
        JobRecord {
            job_id,
            spec,
            submit_ts,
            seq,
            state: JobState::Queued,
            assigned: None,
            exit_code: None,
        }
    }

    /// Moves to `to` if the lifecycle allows it. Other fields are untouched.
    pub fn transition(mut self, to: JobState) -> Result<Self, ModelError> {
        if !self.state.can_transition(to) {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(self)
    }

    pub fn dispatched_to(self, node: NodeId) -> Result<Self, ModelError> {
        let mut r = self.transition(JobState::Dispatched)?;
        r.assigned = Some(node);
        Ok(r)
    }

    /// Zero exit code finishes as DONE, anything else as FAILED.
    pub fn finished(self, exit_code: i32) -> Result<Self, ModelError> {
        let to = if exit_code == 0 { JobState::Done } else { JobState::Failed };
        if self.state != JobState::Dispatched {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        let mut r = self.transition(to)?;
        r.exit_code = Some(exit_code);
        Ok(r)
    }

    /// Rejected before reaching any worker.
    pub fn rejected(self) -> Result<Self, ModelError> {
        if self.state != JobState::Queued {
            return Err(ModelError::IllegalTransition {
                from: self.state,
                to: JobState::Failed,
            });
        }
        self.transition(JobState::Failed)
    }

    pub fn lost(self) -> Result<Self, ModelError> {
        self.transition(JobState::Lost)
    }
}

/// Hands out job ids 1, 2, 3, ...
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdCounter {
    last: u64,
}

impl IdCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continue after the highest id seen during ledger replay.
    pub fn resume_after(max_seen: u64) -> Self {
        IdCounter { last: max_seen }
    }

    pub fn last(&self) -> u64 {
        self.last
    }

    pub fn next_id(&mut self) -> JobId {
        self.last += 1;
        JobId(self.last)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub heartbeat_interval_ms: u64,
    pub stale_after_ms: u64,
    pub dispatch_penalty_milli: u64,
    pub listen_port: u16,
    pub workspace_root: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            heartbeat_interval_ms: 2000,
            stale_after_ms: 6000,
            dispatch_penalty_milli: 50,
            listen_port: 7070,
            workspace_root: "/Jugrid".to_string(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heartbeat_interval_ms == 0 {
            return Err(ModelError::BadConfig("heartbeat_interval_ms must be positive"));
        }
        if self.stale_after_ms < self.heartbeat_interval_ms {
            return Err(ModelError::BadConfig("stale_after_ms must be >= heartbeat_interval_ms"));
        }
        Ok(())
    }
}

/// Milliseconds since the epoch, never going backwards within one process.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock {
    last: AtomicU64,
}

impl SystemClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let prev = self.last.fetch_max(wall, Ordering::AcqRel);
        prev.max(wall)
    }
}

/// Clock that only moves when told to. Used by the simulator and tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock { now: AtomicU64::new(start) }
    }

    /// Sets the time; earlier values are ignored.
    pub fn set(&self, t: u64) {
        self.now.fetch_max(t, Ordering::AcqRel);
    }

    pub fn advance(&self, dt: u64) {
        self.now.fetch_add(dt, Ordering::AcqRel);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }
}

//! Worker-side logic: resource sampling, job execution inside the shared
//! workspace, and the heartbeat/reconnect timing used by the agent daemon.

use std::fs::{self, File};
use std::io;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use thiserror::Error;

use crate::model::{Clock, JobId, JobSpec, NodeId, ResourceSnapshot, MILLI_SCALE};
use crate::protocol::Message;

/// Exit code reported when the command could not be started.
pub const EXIT_CANNOT_START: i32 = 127;
/// Exit code reported when the workdir is missing or outside the workspace.
pub const EXIT_BAD_WORKDIR: i32 = 126;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("system probe unavailable: {0}")]
pub struct ProbeUnavailable(pub String);

pub trait SystemProbe {
    fn cores(&self) -> Result<u32, ProbeUnavailable>;
    /// One-minute load average.
    fn load1(&self) -> Result<f64, ProbeUnavailable>;
    fn mem_total_bytes(&self) -> Result<u64, ProbeUnavailable>;
    fn mem_available_bytes(&self) -> Result<u64, ProbeUnavailable>;
}

/// `1000 - floor(1000 * load1 / cores)`, clamped to 0..=1000.
///
/// The load is taken at micro-unit precision and the rest is integer math, so
/// a kernel value like `0.29` is not floored to 289 by binary rounding.
pub fn acr_from_load(load1: f64, cores: u32) -> u16 {
    let micro = (load1.max(0.0) * 1e6).round().min(u64::MAX as f64) as u128;
    let busy = u128::from(MILLI_SCALE) * micro / (1_000_000 * u128::from(cores.max(1)));
    MILLI_SCALE - busy.min(u128::from(MILLI_SCALE)) as u16
}

pub fn sample(probe: &dyn SystemProbe, running_jobs: u32, now: u64) -> Result<ResourceSnapshot, ProbeUnavailable> {
    let load1 = probe.load1()?;
    if !load1.is_finite() || load1 < 0.0 {
        return Err(ProbeUnavailable(format!("bad load average {load1}")));
    }
    let cores = probe.cores()?;
    let total = probe.mem_total_bytes()?;
    let available = probe.mem_available_bytes()?.min(total);
    Ok(ResourceSnapshot {
        acr_milli: acr_from_load(load1, cores),
        amr_bytes: available,
        running_jobs,
        taken_at: now,
    })
}

/// Reads Linux `/proc/loadavg` and `/proc/meminfo`.
#[derive(Debug, Clone)]
pub struct ProcProbe {
    proc_root: PathBuf,
    cores: Option<u32>,
}

impl Default for ProcProbe {
    fn default() -> Self {
        ProcProbe {
            proc_root: PathBuf::from("/proc"),
            cores: None,
        }
    }
}

impl ProcProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads `loadavg` and `meminfo` from `dir` instead of `/proc`.
    pub fn with_root(dir: impl Into<PathBuf>) -> Self {
        ProcProbe {
            proc_root: dir.into(),
            cores: None,
        }
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores = Some(cores);
        self
    }

    fn read(&self, name: &str) -> Result<String, ProbeUnavailable> {
        let path = self.proc_root.join(name);
        fs::read_to_string(&path).map_err(|e| ProbeUnavailable(format!("{}: {e}", path.display())))
    }

    fn meminfo_kib(&self, key: &str) -> Result<u64, ProbeUnavailable> {
        let text = self.read("meminfo")?;
        text.lines()
            .find_map(|l| {
                let rest = l.strip_prefix(key)?.strip_prefix(':')?;
                rest.split_whitespace().next()?.parse::<u64>().ok()
            })
            .ok_or_else(|| ProbeUnavailable(format!("meminfo has no {key}")))
    }
}

impl SystemProbe for ProcProbe {
    fn cores(&self) -> Result<u32, ProbeUnavailable> {
        if let Some(c) = self.cores {
            return Ok(c);
        }
        std::thread::available_parallelism()
            .map(|n| n.get() as u32)
            .map_err(|e| ProbeUnavailable(e.to_string()))
    }

    fn load1(&self) -> Result<f64, ProbeUnavailable> {
        let text = self.read("loadavg")?;
        text.split_whitespace()
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ProbeUnavailable("unparseable loadavg".into()))
    }

    fn mem_total_bytes(&self) -> Result<u64, ProbeUnavailable> {
        Ok(self.meminfo_kib("MemTotal")? * 1024)
    }

    fn mem_available_bytes(&self) -> Result<u64, ProbeUnavailable> {
        Ok(self.meminfo_kib("MemAvailable")? * 1024)
    }
}

/// Probe returning fixed values; `fail` makes every reading unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedProbe {
    pub cores: u32,
    pub load1: f64,
    pub mem_total: u64,
    pub mem_available: u64,
    pub fail: bool,
}

impl FixedProbe {
    fn check(&self) -> Result<(), ProbeUnavailable> {
        if self.fail {
            Err(ProbeUnavailable("fixed probe set to fail".into()))
        } else {
            Ok(())
        }
    }
}

impl SystemProbe for FixedProbe {
    fn cores(&self) -> Result<u32, ProbeUnavailable> {
        self.check().map(|_| self.cores)
    }
    fn load1(&self) -> Result<f64, ProbeUnavailable> {
        self.check().map(|_| self.load1)
    }
    fn mem_total_bytes(&self) -> Result<u64, ProbeUnavailable> {
        self.check().map(|_| self.mem_total)
    }
    fn mem_available_bytes(&self) -> Result<u64, ProbeUnavailable> {
        self.check().map(|_| self.mem_available)
    }
}

/// A launched job. Dropping it does not kill the process.
#[derive(Debug)]
pub struct RunningJob {
    pub job_id: JobId,
    pub started_at: u64,
    child: Child,
}

impl RunningJob {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Blocks until the process exits. Death by signal N reports `128 + N`.
    pub fn wait(mut self) -> i32 {
        match self.child.wait() {
            Ok(status) => exit_code_of(status),
            Err(_) => EXIT_CANNOT_START,
        }
    }
}

#[cfg(unix)]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(EXIT_CANNOT_START)
}

#[cfg(not(unix))]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(EXIT_CANNOT_START)
}

/// True if `workdir` names a location under `root` without `..` escapes.
pub fn within_workspace(workdir: &Path, root: &Path) -> bool {
    workdir.is_absolute()
        && workdir.starts_with(root)
        && !workdir.components().any(|c| matches!(c, Component::ParentDir))
}

/// Paths of the stdout and stderr capture files for a job.
pub fn output_paths(workdir: &Path, job_id: JobId) -> (PathBuf, PathBuf) {
    (
        workdir.join(format!("{job_id}.out")),
        workdir.join(format!("{job_id}.err")),
    )
}

/// Starts `spec.command` under `/bin/sh -c` in `spec.workdir`, capturing
/// output to `<job_id>.out` and `<job_id>.err` there. On refusal returns the
/// exit code to report instead.
pub fn launch(job_id: JobId, spec: &JobSpec, workspace_root: &Path, now: u64) -> Result<RunningJob, i32> {
    let workdir = Path::new(&spec.workdir);
    if !within_workspace(workdir, workspace_root) || !workdir.is_dir() {
        return Err(EXIT_BAD_WORKDIR);
    }
    let (out_path, err_path) = output_paths(workdir, job_id);
    let (Ok(out), Ok(err)) = (File::create(&out_path), File::create(&err_path)) else {
        return Err(EXIT_BAD_WORKDIR);
    };
    let child = Command::new("/bin/sh")
        .arg("-c")
        .arg(&spec.command)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .spawn()
        .map_err(|_| EXIT_CANNOT_START)?;
    Ok(RunningJob {
        job_id,
        started_at: now,
        child,
    })
}

/// Runs a dispatched job to completion and returns the `JOBDONE` to send.
pub fn run_dispatch(node: &NodeId, job_id: JobId, spec: &JobSpec, workspace_root: &Path, now: u64) -> Message {
    let exit_code = match launch(job_id, spec, workspace_root, now) {
        Ok(job) => job.wait(),
        Err(code) => code,
    };
    Message::JobDone {
        node: node.clone(),
        job_id,
        exit_code,
    }
}

/// Reconnect delays: 1 s, 2 s, 4 s, ... capped at 30 s.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
    max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            next: Duration::from_secs(1),
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Iterator for Backoff {
    type Item = Duration;
    fn next(&mut self) -> Option<Duration> {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        Some(d)
    }
}

/// Tries `connect` until it succeeds, sleeping per [`Backoff`] between
/// failures. Gives up only when `keep_going` turns false.
pub fn connect_with_backoff<T, E>(
    mut connect: impl FnMut() -> Result<T, E>,
    mut sleep: impl FnMut(Duration),
    keep_going: impl Fn() -> bool,
) -> Option<T> {
    let mut delays = Backoff::new();
    loop {
        if !keep_going() {
            return None;
        }
        match connect() {
            Ok(c) => return Some(c),
            Err(_) => sleep(delays.next().expect("backoff is endless")),
        }
    }
}

/// Sends a heartbeat every `interval` until `keep_going` fails or a send
/// errors. A probe failure skips that cycle only.
#[allow(clippy::too_many_arguments)]
pub fn heartbeat_loop(
    node: &NodeId,
    interval: Duration,
    probe: &dyn SystemProbe,
    clock: &dyn Clock,
    running_jobs: impl Fn() -> u32,
    mut sleep: impl FnMut(Duration),
    mut send: impl FnMut(Message) -> io::Result<()>,
    keep_going: impl Fn() -> bool,
) -> io::Result<()> {
    loop {
        sleep(interval);
        if !keep_going() {
            return Ok(());
        }
        if let Some(msg) = heartbeat_message(node, probe, running_jobs(), clock.now_ms()) {
            send(msg)?;
        }
    }
}

/// The heartbeat for one cycle, or `None` if the probe failed.
pub fn heartbeat_message(node: &NodeId, probe: &dyn SystemProbe, running_jobs: u32, now: u64) -> Option<Message> {
    let snap = sample(probe, running_jobs, now).ok()?;
    Some(Message::Heartbeat {
        node: node.clone(),
        acr_milli: snap.acr_milli,
        amr_bytes: snap.amr_bytes,
        running_jobs: snap.running_jobs,
    })
}

//! `hepctl` argument handling and output rendering.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hepinfo_core::protocol::{Message, NodeRow, StateRow};
use hepinfo_core::{JobId, JobSpec};

pub const DEFAULT_MASTER: &str = "127.0.0.1:7070";

pub const EXIT_OK: i32 = 0;
pub const EXIT_REFUSED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONNECTION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hepctl", about = "Submit and inspect jobs on a hepinfo cluster")]
pub struct CtlArgs {
    /// Master address as host:port.
    #[arg(long, env = "HEP_MASTER_ADDR", default_value = DEFAULT_MASTER)]
    pub master: String,
    #[command(subcommand)]
    pub command: CtlCommand,
}

#[derive(Debug, Subcommand)]
pub enum CtlCommand {
    /// Queue a shell command.
    Submit {
        #[arg(long)]
        user: Option<String>,
        /// Working directory on the worker (default: current directory).
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Show one job.
    Status {
        #[arg(value_parser = clap::value_parser!(u64).range(1..))]
        job_id: u64,
    },
    /// List workers.
    Nodes,
    /// List all jobs.
    Jobs,
}

/// Builds the request for a parsed command line. `Err` carries a usage message.
pub fn build_request(
    cmd: &CtlCommand,
    env_user: Option<&str>,
    cwd: Option<&Path>,
) -> Result<Message, String> {
    match cmd {
        CtlCommand::Submit { user, workdir, command } => {
            let user = user
                .as_deref()
                .or(env_user)
                .ok_or("no user: pass --user or set $USER")?;
            let workdir = workdir
                .as_deref()
                .or(cwd)
                .ok_or("no working directory: pass --workdir")?;
            let workdir = workdir.to_str().ok_or("working directory is not valid UTF-8")?;
            let spec = JobSpec::new(user, workdir, command.join(" ")).map_err(|e| e.to_string())?;
            Ok(Message::Submit(spec))
        }
        CtlCommand::Status { job_id } => Ok(Message::Status(JobId(*job_id))),
        CtlCommand::Nodes => Ok(Message::Nodes),
        CtlCommand::Jobs => Ok(Message::Jobs),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Rendered {
    fn ok(stdout: String) -> Self {
        Rendered { code: EXIT_OK, stdout, stderr: String::new() }
    }

    fn fail(code: i32, stderr: String) -> Self {
        Rendered { code, stdout: String::new(), stderr }
    }
}

pub fn state_line(r: &StateRow) -> String {
    let node = r.node.as_ref().map_or("-".to_string(), |n| n.to_string());
    let exit = r.exit_code.map_or("-".to_string(), |c| c.to_string());
    format!("{} {} {} {} {}", r.job_id, r.state, node, r.submit_ts, exit)
}

pub fn node_table(rows: &[NodeRow]) -> String {
    let mut cells = vec![["NODE", "IP", "ACR", "AMR", "RUN", "AGE", "ELIG"].map(String::from).to_vec()];
    for r in rows {
        cells.push(vec![
            r.node.to_string(),
            r.ip.to_string(),
            r.acr_milli.to_string(),
            r.amr_bytes.to_string(),
            r.running_jobs.to_string(),
            r.age_ms.to_string(),
            if r.eligible { "yes" } else { "no" }.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn unexpected(m: &Message) -> Rendered {
    Rendered::fail(EXIT_CONNECTION, format!("hepctl: unexpected reply: {m}\n"))
}

/// Turns the master's replies into output and an exit code.
pub fn render(req: &Message, replies: &[Message]) -> Rendered {
    let Some(last) = replies.last() else {
        return Rendered::fail(EXIT_CONNECTION, "hepctl: no reply\n".into());
    };
    if let Message::Err { code, text } = last {
        return Rendered::fail(EXIT_REFUSED, format!("hepctl: {code}: {text}\n"));
    }
    match req {
        Message::Submit(_) => match last {
            Message::JobId(id) => Rendered::ok(format!("job {id} submitted\n")),
            m => unexpected(m),
        },
        Message::Status(_) => match last {
            Message::State(r) => Rendered::ok(format!("{}\n", state_line(r))),
            m => unexpected(m),
        },
        Message::Nodes | Message::Jobs if *last != Message::Ok => unexpected(last),
        Message::Nodes => {
            let mut rows = Vec::new();
            for m in &replies[..replies.len() - 1] {
                match m {
                    Message::Node(r) => rows.push(r.clone()),
                    m => return unexpected(m),
                }
            }
            Rendered::ok(node_table(&rows))
        }
        Message::Jobs => {
            let mut out = String::new();
            for m in &replies[..replies.len() - 1] {
                match m {
                    Message::State(r) => {
                        out.push_str(&state_line(r));
                        out.push('\n');
                    }
                    m => return unexpected(m),
                }
            }
            Rendered::ok(out)
        }
        m => unexpected(m),
    }
}

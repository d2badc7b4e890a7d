//! Node scoring and first-come first-serve dispatch.
//!
//! A node's score is the plain average of its idle-CPU fraction and its
//! free-memory fraction, both in thousandths. Every dispatch that has not yet
//! been reflected by a heartbeat costs the node `dispatch_penalty_milli`, so a
//! burst of submissions spreads across the cluster instead of piling onto the
//! single best node.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::model::{Config, JobId, JobRecord, NodeId, MILLI_SCALE};
use crate::registry::{NodeRecord, Registry};

/// Queued jobs ordered by `(submit_ts, seq)`.
#[derive(Debug, Clone, Default)]
pub struct PendingQueue {
    entries: BTreeMap<(u64, u64), JobId>,
}

impl PendingQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, job: &JobRecord) {
        self.entries.insert((job.submit_ts, job.seq), job.job_id);
    }

    pub fn head(&self) -> Option<JobId> {
        self.entries.values().next().copied()
    }

    pub fn pop(&mut self) -> Option<JobId> {
        self.entries.pop_first().map(|(_, id)| id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = JobId> + '_ {
        self.entries.values().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchDecision {
    pub job_id: JobId,
    pub node: NodeId,
    pub decided_at: u64,
}

/// Availability in 0..=1000.
pub fn score(r: &NodeRecord) -> u64 {
    let total = u128::from(r.static_info.total_mem_bytes.max(1));
    let amr = u128::from(r.last.amr_bytes).min(total);
    let amr_frac_milli = (u128::from(MILLI_SCALE) * amr / total) as u64;
    (u64::from(r.last.acr_milli) + amr_frac_milli) / 2
}

pub fn effective_score(r: &NodeRecord, cfg: &Config) -> u64 {
    let penalty = cfg.dispatch_penalty_milli.saturating_mul(u64::from(r.in_flight));
    score(r).saturating_sub(penalty)
}

/// Running jobs as last reported plus dispatches sent since.
pub fn estimated_running(r: &NodeRecord) -> u64 {
    u64::from(r.last.running_jobs) + u64::from(r.in_flight)
}

/// `Less` means `a` is the better target.
fn preference(a: &NodeRecord, b: &NodeRecord, cfg: &Config) -> Ordering {
    effective_score(b, cfg)
        .cmp(&effective_score(a, cfg))
        .then_with(|| estimated_running(a).cmp(&estimated_running(b)))
        .then_with(|| a.id().cmp(b.id()))
}

/// The most available candidate. Ties go to fewer running jobs, then the
/// smaller node id.
pub fn select_node<'a, I>(candidates: I, cfg: &Config) -> Option<NodeId>
where
    I: IntoIterator<Item = &'a NodeRecord>,
{
    candidates
        .into_iter()
        .min_by(|a, b| preference(a, b, cfg))
        .map(|r| r.id().clone())
}

/// Assigns queued jobs head-first until the queue empties or no node is
/// eligible. Each decision is recorded against the registry before the next
/// job is considered.
pub fn drain(queue: &mut PendingQueue, registry: &mut Registry, now: u64, cfg: &Config) -> Vec<DispatchDecision> {
    drain_observed(queue, registry, now, cfg, |_, _| {})
}

/// Like [`drain`], calling `observe(candidates, decision)` before each
/// decision is applied.
pub fn drain_observed<F>(
    queue: &mut PendingQueue,
    registry: &mut Registry,
    now: u64,
    cfg: &Config,
    mut observe: F,
) -> Vec<DispatchDecision>
where
    F: FnMut(&[NodeRecord], &DispatchDecision),
{
    let mut decisions = Vec::new();
    while let Some(job_id) = queue.head() {
        let candidates = registry.eligible(now, cfg);
        let Some(node) = select_node(&candidates, cfg) else {
            break;
        };
        queue.pop();
        let decision = DispatchDecision {
            job_id,
            node,
            decided_at: now,
        };
        observe(&candidates, &decision);
        registry
            .note_dispatch(&decision.node)
            .expect("selected node comes from the registry");
        decisions.push(decision);
    }
    decisions
}

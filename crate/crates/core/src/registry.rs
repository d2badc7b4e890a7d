//! The master's table of worker nodes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{Config, NodeId, NodeStatic, ResourceSnapshot};
use crate::protocol::NodeRow;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub static_info: NodeStatic,
    pub last: ResourceSnapshot,
    pub last_heartbeat_at: u64,
    /// Dispatches sent since the last heartbeat.
    pub in_flight: u32,
}

impl NodeRecord {
    pub fn id(&self) -> &NodeId {
        &self.static_info.id
    }

    pub fn age_ms(&self, now: u64) -> u64 {
        now.saturating_sub(self.last_heartbeat_at)
    }

    /// Inclusive: a heartbeat exactly `stale_after_ms` old still counts.
    pub fn is_fresh(&self, now: u64, cfg: &Config) -> bool {
        self.age_ms(now) <= cfg.stale_after_ms
    }
}

/// Node table keyed (and therefore ordered) by node id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    nodes: BTreeMap<NodeId, NodeRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: &NodeId) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    /// Adds or replaces a node. The new record starts with an all-zero
    /// snapshot and counts as heartbeated at `now`.
    pub fn register(&mut self, s: NodeStatic, now: u64) {
        let rec = NodeRecord {
            last: ResourceSnapshot {
                taken_at: now,
                ..ResourceSnapshot::default()
            },
            last_heartbeat_at: now,
            in_flight: 0,
            static_info: s,
        };
        self.nodes.insert(rec.id().clone(), rec);
    }

    pub fn heartbeat(&mut self, id: &NodeId, snap: ResourceSnapshot, now: u64) -> Result<(), RegistryError> {
        let rec = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownNode(id.clone()))?;
        rec.last = ResourceSnapshot {
            amr_bytes: snap.amr_bytes.min(rec.static_info.total_mem_bytes),
            ..snap
        };
        rec.last_heartbeat_at = now;
        rec.in_flight = 0;
        Ok(())
    }

    /// Fresh nodes in id order.
    pub fn eligible(&self, now: u64, cfg: &Config) -> Vec<NodeRecord> {
        self.nodes.values().filter(|r| r.is_fresh(now, cfg)).cloned().collect()
    }

    pub fn note_dispatch(&mut self, id: &NodeId) -> Result<(), RegistryError> {
        let rec = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownNode(id.clone()))?;
        rec.in_flight += 1;
        Ok(())
    }

    pub fn table_rows(&self, now: u64, cfg: &Config) -> Vec<NodeRow> {
        self.nodes
            .values()
            .map(|r| NodeRow {
                node: r.id().clone(),
                ip: r.static_info.ip,
                acr_milli: r.last.acr_milli,
                amr_bytes: r.last.amr_bytes,
                running_jobs: r.last.running_jobs,
                age_ms: r.age_ms(now),
                eligible: r.is_fresh(now, cfg),
            })
            .collect()
    }
}

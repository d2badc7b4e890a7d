//! Cluster middleware for a small master/worker analysis facility.
//!
//! Workers report their available CPU (ACR) and memory (AMR); the master keeps
//! a first-come first-serve queue and sends each job to the most available
//! eligible worker. Everything here is synchronous and I/O-light so the same
//! code drives both the real daemons and the deterministic simulator.

pub mod agent;
pub mod ledger;
pub mod master;
pub mod model;
pub mod protocol;
pub mod registry;
pub mod scheduler;
pub mod sim;

pub use model::{
    Clock, Config, IdCounter, JobId, JobRecord, JobSpec, JobState, ManualClock, ModelError,
    NodeId, NodeStatic, ResourceSnapshot, SystemClock,
};
pub use protocol::{DecodeError, FrameError, LineFramer, Message};
pub use registry::{NodeRecord, Registry, RegistryError};
pub use scheduler::{DispatchDecision, PendingQueue};

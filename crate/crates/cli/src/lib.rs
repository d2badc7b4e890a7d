//! Network daemons and command-line front ends for the hepinfo scheduler.

pub mod agentd;
pub mod client;
pub mod ctl;
pub mod server;

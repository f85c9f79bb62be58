//! Multi-Paxos replicated log with two recovery strategies for a failed
//! replica: reincarnation from its own memory through the Rack MMU, or
//! reconfiguration to a fresh member fed a state snapshot.

pub mod app;
pub mod check;
pub mod core;
pub mod fuzz;
pub mod store;
pub mod types;

pub use self::app::{PaxosApp, PaxosCluster, PaxosParams};
pub use self::check::RecoveryMetrics;
pub use self::core::{Replica, Timing};
pub use self::types::{Command, MemberId, Strategy, Wire};

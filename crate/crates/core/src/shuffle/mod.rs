//! Shuffle and straggler workloads that move task state through pooled
//! memory instead of the network.

pub mod straggler;
pub mod transfer;

pub use self::straggler::{straggler_report, Mitigation, StragglerParams, StragglerReport, StragglerRun};
pub use self::transfer::{speedup, transfer_report, ShuffleParams, ShuffleRun, TransferMode, TransferReport};

//! Deterministic discrete-event simulator of a disaggregated rack: compute
//! elements, proxied memory elements, a Rack MMU that grants and steals
//! pages, and a rack monitor that runs fast failure handlers.

pub mod addr;
pub mod engine;
pub mod heap;
pub mod latency;
pub mod memory;
pub mod mmu;
pub mod monitor;
pub mod os;
pub mod paxos;
pub mod primitives;
pub mod rack;
pub mod runner;
pub mod scenario;
pub mod shuffle;
pub mod time;
pub mod trace;

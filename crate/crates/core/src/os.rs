//! Per-compute-element OS state: hosted processes, the translation cache,
//! signal dispositions and the forwarding tables used for failure
//! notification.
//!
//! The syscall entry points live on [`crate::rack::Rack`], which owns the
//! event loop; this module holds the state they manipulate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{ComputeId, FrameId, MemId, ProcessId, RackId, VirtualAddress, VirtualPage};
use crate::memory::Fault;
use crate::mmu::MmuError;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    MemoryFault,
    PageAdded,
    GroupFailureNotice,
}

/// What failed, as carried by a failure notice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FailureDescriptor {
    Memory { element: MemId },
    Compute { compute: ComputeId },
    Process { pid: ProcessId },
}

impl fmt::Display for FailureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureDescriptor::Memory { element } => write!(f, "memory {element}"),
            FailureDescriptor::Compute { compute } => write!(f, "compute {compute}"),
            FailureDescriptor::Process { pid } => write!(f, "process {pid}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Signal {
    MemoryFault {
        addr: VirtualAddress,
        fault: Fault,
    },
    PageAdded {
        pages: Vec<VirtualPage>,
    },
    GroupFailureNotice {
        /// The process the failure concerns (the sender, for OS broadcasts).
        about: ProcessId,
        seq: u64,
        failure: FailureDescriptor,
    },
}

impl Signal {
    pub fn kind(&self) -> SignalKind {
        match self {
            Signal::MemoryFault { .. } => SignalKind::MemoryFault,
            Signal::PageAdded { .. } => SignalKind::PageAdded,
            Signal::GroupFailureNotice { .. } => SignalKind::GroupFailureNotice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OsError {
    #[error("process {0} is not running")]
    NotRunning(ProcessId),
    #[error("process {0} has no failure group registered")]
    NoGroupRegistered(ProcessId),
    #[error("unknown group member {0}")]
    UnknownMember(ProcessId),
    #[error("unknown compute element {0}")]
    UnknownCompute(ComputeId),
    #[error(transparent)]
    Mmu(#[from] MmuError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcState {
    Running,
    Exited { cause: String },
}

#[derive(Debug, Clone)]
pub struct Process {
    pub pid: ProcessId,
    pub compute: ComputeId,
    pub state: ProcState,
    pub handlers: BTreeSet<SignalKind>,
    /// Synchronous work charged to the process runs until this time; its
    /// sends and timers depart from here.
    pub busy_until: SimTime,
}

impl Process {
    pub fn new(pid: ProcessId, compute: ComputeId) -> Self {
        Process {
            pid,
            compute,
            state: ProcState::Running,
            handlers: BTreeSet::new(),
            busy_until: SimTime::ZERO,
        }
    }

    pub fn is_running(&self) -> bool {
        self.state == ProcState::Running
    }

    pub fn handles(&self, kind: SignalKind) -> bool {
        self.handlers.contains(&kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeState {
    Alive,
    Crashed,
    /// Not fail-stop: frozen until `until`, then resumes with its state.
    Stalled { until: SimTime },
}

#[derive(Debug, Clone)]
pub struct ComputeElement {
    pub id: ComputeId,
    pub rack: RackId,
    pub state: ComputeState,
    pub processes: BTreeSet<ProcessId>,
    cache: BTreeMap<(ProcessId, VirtualPage), FrameId>,
    forwarding: BTreeMap<ProcessId, Vec<BTreeSet<ProcessId>>>,
    notice_seq: BTreeMap<ProcessId, u64>,
}

impl ComputeElement {
    pub fn new(id: ComputeId, rack: RackId) -> Self {
        ComputeElement {
            id,
            rack,
            state: ComputeState::Alive,
            processes: BTreeSet::new(),
            cache: BTreeMap::new(),
            forwarding: BTreeMap::new(),
            notice_seq: BTreeMap::new(),
        }
    }

    pub fn is_alive(&self) -> bool {
        self.state == ComputeState::Alive
    }

    pub fn cached(&self, pid: ProcessId, page: VirtualPage) -> Option<FrameId> {
        self.cache.get(&(pid, page)).copied()
    }

    pub fn cache_insert(&mut self, pid: ProcessId, page: VirtualPage, frame: FrameId) {
        self.cache.insert((pid, page), frame);
    }

    pub fn invalidate(&mut self, pid: ProcessId, pages: &[VirtualPage]) {
        for p in pages {
            self.cache.remove(&(pid, *p));
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn register_failure_group(&mut self, pid: ProcessId, members: BTreeSet<ProcessId>) {
        self.forwarding.entry(pid).or_default().push(members);
    }

    pub fn forwarding_table(&self, pid: ProcessId) -> Option<&[BTreeSet<ProcessId>]> {
        self.forwarding.get(&pid).map(Vec::as_slice)
    }

    /// Every registered contact for `pid`, each once, in pid order.
    pub fn contacts(&self, pid: ProcessId) -> Option<BTreeSet<ProcessId>> {
        let groups = self.forwarding.get(&pid)?;
        Some(groups.iter().flatten().copied().collect())
    }

    pub fn next_notice_seq(&mut self, pid: ProcessId) -> u64 {
        let seq = self.notice_seq.entry(pid).or_insert(0);
        *seq += 1;
        *seq
    }

    pub fn forget_process(&mut self, pid: ProcessId) {
        self.forwarding.remove(&pid);
        self.cache.retain(|&(p, _), _| p != pid);
    }

    /// Fail-stop: everything compute-local is lost.
    pub fn crash(&mut self) {
        self.state = ComputeState::Crashed;
        self.cache.clear();
        self.forwarding.clear();
        self.notice_seq.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: ProcessId = ProcessId::new(1);

    #[test]
    fn cache_invalidation() {
        let mut ce = ComputeElement::new(ComputeId(0), RackId(0));
        let v = VirtualPage::new(P1, 0).unwrap();
        ce.cache_insert(P1, v, FrameId::new(MemId(0), 3));
        assert_eq!(ce.cached(P1, v), Some(FrameId::new(MemId(0), 3)));
        ce.invalidate(P1, &[v]);
        assert_eq!(ce.cached(P1, v), None);
    }

    #[test]
    fn forwarding_table_dies_with_compute() {
        let mut ce = ComputeElement::new(ComputeId(0), RackId(0));
        ce.register_failure_group(P1, [ProcessId::new(2), ProcessId::new(3)].into());
        ce.register_failure_group(P1, [ProcessId::new(3), ProcessId::new(4)].into());
        assert_eq!(ce.contacts(P1).unwrap().len(), 3);
        ce.crash();
        assert!(ce.contacts(P1).is_none());
        assert!(!ce.is_alive());
    }

    #[test]
    fn empty_group_is_valid() {
        let mut ce = ComputeElement::new(ComputeId(0), RackId(0));
        ce.register_failure_group(P1, BTreeSet::new());
        assert_eq!(ce.contacts(P1), Some(BTreeSet::new()));
    }

    #[test]
    fn notice_sequence_numbers_increase() {
        let mut ce = ComputeElement::new(ComputeId(0), RackId(0));
        assert_eq!(ce.next_notice_seq(P1), 1);
        assert_eq!(ce.next_notice_seq(P1), 2);
    }

    #[test]
    fn descriptor_json() {
        let d = FailureDescriptor::Memory { element: MemId(2) };
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"{"type":"memory","element":2}"#);
    }
}

//! Proxied memory elements.
//!
//! An element holds frames and a local page table keyed by
//! `(pid, virtual page)`. Every access is checked against that table; the
//! Rack MMU is the only writer of the table.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{AccessKind, FrameId, MemId, Perms, ProcessId, RackId, VirtualAddress, VirtualPage, PAGE_SIZE};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// The element has no entry for this `(pid, page)`.
    NoEntry,
    /// An entry exists but does not permit the operation.
    Permission,
    /// The element's proxy reported a media failure.
    ElementError,
    /// No reply arrived before the access timeout.
    Timeout,
    /// The Rack MMU has no mapping for the address.
    Unmapped,
    /// The access crosses a page boundary.
    OutOfBounds,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::NoEntry => "no-entry",
            Fault::Permission => "permission",
            Fault::ElementError => "element-error",
            Fault::Timeout => "timeout",
            Fault::Unmapped => "unmapped",
            Fault::OutOfBounds => "out-of-bounds",
        })
    }
}

/// How a failed element behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    /// The whole element is unreachable; callers time out.
    #[default]
    Silent,
    /// The proxy is up but the media is gone; it answers with an error.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Health {
    Alive,
    Failed { at: SimTime, mode: FailureMode },
}

/// A page-table change pushed by the Rack MMU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementUpdate {
    Set {
        pid: ProcessId,
        page: VirtualPage,
        frame: u32,
        perms: Perms,
        /// Zero the frame first (fresh allocation).
        zero: bool,
    },
    Clear {
        pid: ProcessId,
        page: VirtualPage,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOp {
    Read { len: usize },
    Write { data: Vec<u8> },
}

impl AccessOp {
    pub fn kind(&self) -> AccessKind {
        match self {
            AccessOp::Read { .. } => AccessKind::Read,
            AccessOp::Write { .. } => AccessKind::Write,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AccessOp::Read { len } => *len,
            AccessOp::Write { data } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What the element sends back. `None` from [`MemoryElement::access`]
/// means it sends nothing at all.
pub type AccessReply = Result<Vec<u8>, Fault>;

#[derive(Debug, Clone)]
pub struct MemoryElement {
    id: MemId,
    rack: RackId,
    frames: Vec<Option<Box<[u8]>>>,
    table: BTreeMap<(ProcessId, VirtualPage), (u32, Perms)>,
    health: Health,
}

impl MemoryElement {
    pub fn new(id: MemId, rack: RackId, capacity: u32) -> Self {
        MemoryElement {
            id,
            rack,
            frames: vec![None; capacity as usize],
            table: BTreeMap::new(),
            health: Health::Alive,
        }
    }

    pub fn id(&self) -> MemId {
        self.id
    }

    pub fn rack(&self) -> RackId {
        self.rack
    }

    pub fn capacity(&self) -> u32 {
        self.frames.len() as u32
    }

    pub fn health(&self) -> Health {
        self.health
    }

    pub fn is_alive(&self) -> bool {
        self.health == Health::Alive
    }

    /// Applies a page-table update; returns the frame an entry referred to
    /// (for the trace). Clearing an absent entry is a no-op.
    pub fn apply(&mut self, update: &ElementUpdate) -> Option<FrameId> {
        match *update {
            ElementUpdate::Set { pid, page, frame, perms, zero } => {
                if zero {
                    self.frames[frame as usize] = None;
                }
                self.table.insert((pid, page), (frame, perms));
                Some(FrameId::new(self.id, frame))
            }
            ElementUpdate::Clear { pid, page } => self
                .table
                .remove(&(pid, page))
                .map(|(f, _)| FrameId::new(self.id, f)),
        }
    }

    pub fn entry(&self, pid: ProcessId, page: VirtualPage) -> Option<(u32, Perms)> {
        self.table.get(&(pid, page)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ProcessId, VirtualPage, u32, Perms)> + '_ {
        self.table.iter().map(|(&(pid, page), &(f, p))| (pid, page, f, p))
    }

    /// Checks and performs one access. Accesses may not cross a page.
    pub fn access(&mut self, pid: ProcessId, addr: VirtualAddress, op: &AccessOp) -> Option<AccessReply> {
        match self.health {
            Health::Failed { mode: FailureMode::Silent, .. } => return None,
            Health::Failed { mode: FailureMode::Explicit, .. } => return Some(Err(Fault::ElementError)),
            Health::Alive => {}
        }
        let off = addr.offset();
        if off + op.len() > PAGE_SIZE {
            return Some(Err(Fault::OutOfBounds));
        }
        let Some(&(frame, perms)) = self.table.get(&(pid, addr.page())) else {
            return Some(Err(Fault::NoEntry));
        };
        if !perms.allows(op.kind()) {
            return Some(Err(Fault::Permission));
        }
        let slot = &mut self.frames[frame as usize];
        Some(Ok(match op {
            AccessOp::Read { len } => match slot {
                Some(bytes) => bytes[off..off + len].to_vec(),
                None => vec![0; *len],
            },
            AccessOp::Write { data } => {
                let bytes = slot.get_or_insert_with(|| vec![0u8; PAGE_SIZE].into_boxed_slice());
                bytes[off..off + data.len()].copy_from_slice(data);
                Vec::new()
            }
        }))
    }

    /// Raw frame contents, bypassing the table. For invariant checks only.
    pub fn frame_bytes(&self, frame: u32) -> Vec<u8> {
        match &self.frames[frame as usize] {
            Some(b) => b.to_vec(),
            None => vec![0; PAGE_SIZE],
        }
    }

    /// Marks the element failed. Failure is permanent; a second injection
    /// is ignored and returns false.
    pub fn fail(&mut self, at: SimTime, mode: FailureMode) -> bool {
        if self.health != Health::Alive {
            return false;
        }
        self.health = Health::Failed { at, mode };
        if mode == FailureMode::Silent {
            // the frames are gone with the element
            self.frames.iter_mut().for_each(|f| *f = None);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: ProcessId = ProcessId::new(1);
    const P2: ProcessId = ProcessId::new(2);

    fn page(pid: ProcessId, n: u64) -> VirtualPage {
        VirtualPage::new(pid, n).unwrap()
    }

    fn element() -> MemoryElement {
        let mut m = MemoryElement::new(MemId(0), RackId(0), 4);
        m.apply(&ElementUpdate::Set { pid: P1, page: page(P1, 0), frame: 0, perms: Perms::READ_WRITE, zero: true });
        m
    }

    fn write(m: &mut MemoryElement, pid: ProcessId, addr: VirtualAddress, data: &[u8]) -> Option<AccessReply> {
        m.access(pid, addr, &AccessOp::Write { data: data.to_vec() })
    }

    fn read(m: &mut MemoryElement, pid: ProcessId, addr: VirtualAddress, len: usize) -> Option<AccessReply> {
        m.access(pid, addr, &AccessOp::Read { len })
    }

    #[test]
    fn write_then_read_round_trips() {
        let mut m = element();
        let a = page(P1, 0).at(100);
        assert_eq!(write(&mut m, P1, a, b"hello"), Some(Ok(vec![])));
        assert_eq!(read(&mut m, P1, a, 5), Some(Ok(b"hello".to_vec())));
    }

    #[test]
    fn cleared_entry_faults() {
        let mut m = element();
        m.apply(&ElementUpdate::Clear { pid: P1, page: page(P1, 0) });
        assert_eq!(read(&mut m, P1, page(P1, 0).base(), 1), Some(Err(Fault::NoEntry)));
        // clearing again is a no-op
        assert_eq!(m.apply(&ElementUpdate::Clear { pid: P1, page: page(P1, 0) }), None);
    }

    #[test]
    fn duplicate_set_is_one_entry() {
        let mut m = element();
        let set = ElementUpdate::Set { pid: P1, page: page(P1, 0), frame: 0, perms: Perms::READ_WRITE, zero: false };
        m.apply(&set);
        m.apply(&set);
        assert_eq!(m.entries().count(), 1);
    }

    #[test]
    fn reassignment_preserves_bytes() {
        let mut m = element();
        let v = page(P1, 0);
        write(&mut m, P1, v.at(0), &[7; 64]);
        m.apply(&ElementUpdate::Clear { pid: P1, page: v });
        m.apply(&ElementUpdate::Set { pid: P2, page: v, frame: 0, perms: Perms::READ_WRITE, zero: false });
        assert_eq!(read(&mut m, P2, v.at(0), 64), Some(Ok(vec![7; 64])));
        assert_eq!(read(&mut m, P1, v.at(0), 64), Some(Err(Fault::NoEntry)));
    }

    #[test]
    fn permissions_enforced() {
        let mut m = MemoryElement::new(MemId(0), RackId(0), 1);
        m.apply(&ElementUpdate::Set { pid: P1, page: page(P1, 0), frame: 0, perms: Perms::READ, zero: true });
        assert_eq!(write(&mut m, P1, page(P1, 0).base(), b"x"), Some(Err(Fault::Permission)));
        assert_eq!(read(&mut m, P1, page(P1, 0).base(), 1), Some(Ok(vec![0])));
    }

    #[test]
    fn page_crossing_rejected() {
        let mut m = element();
        assert_eq!(read(&mut m, P1, page(P1, 0).at(4090), 10), Some(Err(Fault::OutOfBounds)));
    }

    #[test]
    fn isolation_is_exhaustive_at_small_scale() {
        // every (pid, page) pair not in the table is refused
        let mut m = MemoryElement::new(MemId(0), RackId(0), 8);
        let mapped = [(1u8, 0u64, 0u32), (2, 3, 1), (3, 1, 2)];
        for &(p, n, f) in &mapped {
            let pid = ProcessId::new(p);
            m.apply(&ElementUpdate::Set { pid, page: page(pid, n), frame: f, perms: Perms::READ_WRITE, zero: true });
        }
        for caller in 0..8u8 {
            for owner in 0..8u8 {
                for n in 0..8u64 {
                    let caller = ProcessId::new(caller);
                    let v = page(ProcessId::new(owner), n);
                    let in_table = mapped.iter().any(|&(p, pn, _)| ProcessId::new(p) == caller && page(caller, pn) == v);
                    let r = read(&mut m, caller, v.base(), 8).unwrap();
                    assert_eq!(r.is_ok(), in_table, "caller {caller} page {v}");
                }
            }
        }
    }

    #[test]
    fn failure_modes() {
        let mut silent = element();
        assert!(silent.fail(SimTime::ZERO, FailureMode::Silent));
        assert_eq!(read(&mut silent, P1, page(P1, 0).base(), 1), None);
        assert!(!silent.fail(SimTime::from_micros(5), FailureMode::Explicit));
        assert!(matches!(silent.health(), Health::Failed { mode: FailureMode::Silent, .. }));

        let mut explicit = element();
        explicit.fail(SimTime::ZERO, FailureMode::Explicit);
        assert_eq!(read(&mut explicit, P1, page(P1, 0).base(), 1), Some(Err(Fault::ElementError)));
    }
}

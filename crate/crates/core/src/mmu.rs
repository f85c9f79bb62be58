//! The Rack MMU: page allocation, per-process V2P tables, and the mapping
//! moves behind grant and steal.
//!
//! This is a pure state machine. Every mutating operation returns the
//! [`Effects`] it implies (page-table updates for memory elements and
//! translation-cache invalidations for compute elements); the rack turns
//! those into timed messages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::addr::{
    ComputeId, FrameId, MemId, Perms, ProcessId, RackId, VirtualAddress, VirtualPage, MAX_PROCESSES,
    PAGE_NUMBER_BITS,
};
use crate::memory::ElementUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error("unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error("unknown compute element {0}")]
    UnknownCompute(ComputeId),
    #[error("process {0} is dead")]
    DestinationDead(ProcessId),
    #[error("out of frames: wanted {wanted}, {free} free")]
    OutOfFrames { wanted: usize, free: usize },
    #[error("no live memory element is reachable")]
    NoReachableElement,
    #[error("page {0} is not mapped")]
    Unmapped(VirtualPage),
    #[error("page {0} has been revoked")]
    PermissionAbsent(VirtualPage),
    #[error("a process cannot grant to itself")]
    SelfGrant,
    #[error("{caller} shares no group with {src}")]
    NotInGroup { caller: ProcessId, src: ProcessId },
    #[error("page {0} was allocated without steal permission")]
    StealDisallowed(VirtualPage),
    #[error("frame for page {page} is unreachable from {compute}")]
    Unreachable { page: VirtualPage, compute: ComputeId },
    #[error("{0} has nothing left to steal")]
    NothingToSteal(ProcessId),
    #[error("process ids exhausted")]
    NoFreePid,
    #[error("address space of {0} exhausted")]
    AddressSpaceExhausted(ProcessId),
}

impl MmuError {
    pub fn code(&self) -> &'static str {
        match self {
            MmuError::UnknownProcess(_) => "unknown-process",
            MmuError::UnknownCompute(_) => "unknown-compute",
            MmuError::DestinationDead(_) => "dst-process-dead",
            MmuError::OutOfFrames { .. } => "out-of-frames",
            MmuError::NoReachableElement => "no-reachable-element",
            MmuError::Unmapped(_) => "unmapped-page",
            MmuError::PermissionAbsent(_) => "permission-absent",
            MmuError::SelfGrant => "self-grant",
            MmuError::NotInGroup { .. } => "not-in-group",
            MmuError::StealDisallowed(_) => "page-steal-disallowed",
            MmuError::Unreachable { .. } => "unreachable",
            MmuError::NothingToSteal(_) => "nothing-to-steal",
            MmuError::NoFreePid => "no-free-pid",
            MmuError::AddressSpaceExhausted(_) => "address-space-exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Mapping {
    pub frame: FrameId,
    pub perms: Perms,
    pub allow_steal: bool,
    /// Permissions held before a revoke; `Some` while revoked.
    pub revoked: Option<Perms>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct V2PTable {
    pub entries: BTreeMap<VirtualPage, Mapping>,
    pub reserved: BTreeSet<VirtualPage>,
    next_page: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StealSet {
    All,
    Pages(Vec<VirtualPage>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessRecord {
    pub compute: ComputeId,
    pub alive: bool,
}

/// Messages implied by a mapping change, in the order they must be sent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub updates: Vec<(MemId, ElementUpdate)>,
    pub invalidate: Vec<(ProcessId, ComputeId, Vec<VirtualPage>)>,
    /// Pages that changed hands (or were created), with their frames.
    pub moved: Vec<(VirtualPage, FrameId)>,
}

impl Effects {
    pub fn pages(&self) -> Vec<VirtualPage> {
        self.moved.iter().map(|&(p, _)| p).collect()
    }

    pub fn frames(&self) -> Vec<FrameId> {
        self.moved.iter().map(|&(_, f)| f).collect()
    }
}

/// Deliberate defects for harness self-tests.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectedBug {
    /// Grant sets the new owner's entry but never clears the old one.
    GrantSkipsClear,
}

#[derive(Debug, Clone)]
struct ElementState {
    rack: RackId,
    alive: bool,
    free: BTreeSet<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct RackMmu {
    elements: BTreeMap<MemId, ElementState>,
    computes: BTreeMap<ComputeId, RackId>,
    links: BTreeSet<(ComputeId, MemId)>,
    processes: BTreeMap<ProcessId, ProcessRecord>,
    tables: BTreeMap<ProcessId, V2PTable>,
    groups: BTreeMap<GroupId, BTreeSet<ProcessId>>,
    frame_owner: BTreeMap<FrameId, (ProcessId, VirtualPage)>,
    bug: Option<InjectedBug>,
}

impl RackMmu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_memory_element(&mut self, id: MemId, rack: RackId, frames: u32) {
        self.elements.insert(id, ElementState { rack, alive: true, free: (0..frames).collect() });
        for (&c, &r) in &self.computes {
            if r == rack {
                self.links.insert((c, id));
            }
        }
    }

    /// Registers a compute element; it can reach every memory element in
    /// its rack.
    pub fn add_compute_element(&mut self, id: ComputeId, rack: RackId) {
        self.computes.insert(id, rack);
        for (&m, e) in &self.elements {
            if e.rack == rack {
                self.links.insert((id, m));
            }
        }
    }

    pub fn is_reachable(&self, compute: ComputeId, element: MemId) -> bool {
        self.links.contains(&(compute, element))
    }

    pub fn mark_element_failed(&mut self, id: MemId) {
        if let Some(e) = self.elements.get_mut(&id) {
            e.alive = false;
        }
    }

    #[doc(hidden)]
    pub fn inject_bug(&mut self, bug: Option<InjectedBug>) {
        self.bug = bug;
    }

    /// Records a process the rack started. Pids are never reused.
    pub fn register_process(&mut self, pid: ProcessId, compute: ComputeId) -> Result<(), MmuError> {
        if !self.computes.contains_key(&compute) {
            return Err(MmuError::UnknownCompute(compute));
        }
        self.processes.insert(pid, ProcessRecord { compute, alive: true });
        self.tables.entry(pid).or_default();
        Ok(())
    }

    /// Picks the lowest never-used pid and registers it on `compute`.
    pub fn provision(&mut self, compute: ComputeId) -> Result<ProcessId, MmuError> {
        let pid = (0..MAX_PROCESSES)
            .map(|i| ProcessId::new(i as u8))
            .find(|p| !self.processes.contains_key(p))
            .ok_or(MmuError::NoFreePid)?;
        self.register_process(pid, compute)?;
        Ok(pid)
    }

    pub fn mark_dead(&mut self, pid: ProcessId) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.alive = false;
        }
    }

    pub fn process(&self, pid: ProcessId) -> Option<ProcessRecord> {
        self.processes.get(&pid).copied()
    }

    pub fn table(&self, pid: ProcessId) -> Option<&V2PTable> {
        self.tables.get(&pid)
    }

    pub fn tables(&self) -> impl Iterator<Item = (ProcessId, &V2PTable)> {
        self.tables.iter().map(|(&p, t)| (p, t))
    }

    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &BTreeSet<ProcessId>)> {
        self.groups.iter().map(|(&g, m)| (g, m))
    }

    pub fn free_frames(&self, element: MemId) -> usize {
        self.elements.get(&element).map_or(0, |e| e.free.len())
    }

    fn known(&self, pid: ProcessId) -> Result<ProcessRecord, MmuError> {
        self.process(pid).ok_or(MmuError::UnknownProcess(pid))
    }

    pub fn allocate(
        &mut self,
        pid: ProcessId,
        n_pages: usize,
        allow_steal: bool,
    ) -> Result<Effects, MmuError> {
        let proc = self.known(pid)?;
        if n_pages == 0 {
            return Ok(Effects::default());
        }
        let candidates: Vec<MemId> = self
            .elements
            .iter()
            .filter(|(&m, e)| e.alive && self.is_reachable(proc.compute, m))
            .map(|(&m, _)| m)
            .collect();
        if candidates.is_empty() {
            return Err(MmuError::NoReachableElement);
        }
        let free: usize = candidates.iter().map(|m| self.elements[m].free.len()).sum();
        if free < n_pages {
            return Err(MmuError::OutOfFrames { wanted: n_pages, free });
        }
        let table = self.tables.entry(pid).or_default();
        if table.next_page + n_pages as u64 > 1 << PAGE_NUMBER_BITS {
            return Err(MmuError::AddressSpaceExhausted(pid));
        }

        let mut frames = Vec::with_capacity(n_pages);
        'outer: for m in candidates {
            let e = self.elements.get_mut(&m).expect("candidate exists");
            while let Some(f) = e.free.pop_first() {
                frames.push(FrameId::new(m, f));
                if frames.len() == n_pages {
                    break 'outer;
                }
            }
        }

        let mut fx = Effects::default();
        for frame in frames {
            let page = VirtualPage::new(pid, table.next_page).expect("checked against address space");
            table.next_page += 1;
            table.entries.insert(
                page,
                Mapping { frame, perms: Perms::READ_WRITE, allow_steal, revoked: None },
            );
            self.frame_owner.insert(frame, (pid, page));
            fx.updates.push((
                frame.element,
                ElementUpdate::Set { pid, page, frame: frame.index, perms: Perms::READ_WRITE, zero: true },
            ));
            fx.moved.push((page, frame));
        }
        Ok(fx)
    }

    pub fn translate(&self, pid: ProcessId, addr: VirtualAddress) -> Result<(FrameId, Perms), MmuError> {
        let page = addr.page();
        let m = self
            .tables
            .get(&pid)
            .and_then(|t| t.entries.get(&page))
            .ok_or(MmuError::Unmapped(page))?;
        if m.perms.is_none() {
            return Err(MmuError::PermissionAbsent(page));
        }
        Ok((m.frame, m.perms))
    }

    pub fn shares_group(&self, a: ProcessId, b: ProcessId) -> bool {
        a == b || self.groups.values().any(|g| g.contains(&a) && g.contains(&b))
    }

    pub fn register_group(&mut self, members: &[ProcessId]) -> Result<GroupId, MmuError> {
        for &m in members {
            self.known(m)?;
        }
        let id = GroupId(self.groups.len() as u32);
        self.groups.insert(id, members.iter().copied().collect());
        Ok(id)
    }

    // Moves `pages` from `from` to `to`, restoring revoked permissions.
    // Callers have validated everything; this cannot fail.
    fn move_pages(&mut self, from: ProcessId, to: ProcessId, pages: &[VirtualPage], clear: bool) -> Effects {
        let from_compute = self.processes[&from].compute;
        let mut fx = Effects::default();
        for &page in pages {
            let src = self.tables.get_mut(&from).expect("validated");
            let mut m = src.entries.remove(&page).expect("validated");
            src.reserved.insert(page);
            let was_revoked = m.revoked.is_some();
            if let Some(p) = m.revoked.take() {
                m.perms = p;
            }
            if clear && !was_revoked && self.bug != Some(InjectedBug::GrantSkipsClear) {
                fx.updates.push((m.frame.element, ElementUpdate::Clear { pid: from, page }));
            }
            fx.updates.push((
                m.frame.element,
                ElementUpdate::Set { pid: to, page, frame: m.frame.index, perms: m.perms, zero: false },
            ));
            let dst = self.tables.entry(to).or_default();
            // a page coming home is no longer a reservation
            dst.reserved.remove(&page);
            dst.entries.insert(page, m);
            self.frame_owner.insert(m.frame, (to, page));
            fx.moved.push((page, m.frame));
        }
        if !pages.is_empty() {
            fx.invalidate.push((from, from_compute, pages.to_vec()));
        }
        fx
    }

    fn check_reachable(&self, to: ProcessId, pages: &[VirtualPage], from: ProcessId) -> Result<(), MmuError> {
        let compute = self.processes[&to].compute;
        for &page in pages {
            let frame = self.tables[&from].entries[&page].frame;
            if !self.is_reachable(compute, frame.element) {
                return Err(MmuError::Unreachable { page, compute });
            }
        }
        Ok(())
    }

    pub fn grant(&mut self, src: ProcessId, pages: &[VirtualPage], dst: ProcessId) -> Result<Effects, MmuError> {
        if pages.is_empty() {
            return Ok(Effects::default());
        }
        if src == dst {
            return Err(MmuError::SelfGrant);
        }
        self.known(src)?;
        if !self.known(dst)?.alive {
            return Err(MmuError::DestinationDead(dst));
        }
        let pages = dedup(pages);
        let table = &self.tables[&src];
        for &page in &pages {
            match table.entries.get(&page) {
                None => return Err(MmuError::Unmapped(page)),
                Some(m) if m.revoked.is_some() => return Err(MmuError::PermissionAbsent(page)),
                Some(_) => {}
            }
        }
        self.check_reachable(dst, &pages, src)?;
        Ok(self.move_pages(src, dst, &pages, true))
    }

    pub fn steal(&mut self, caller: ProcessId, src: ProcessId, which: &StealSet) -> Result<Effects, MmuError> {
        self.known(caller)?;
        self.known(src)?;
        if caller == src {
            return Ok(Effects::default());
        }
        if !self.shares_group(caller, src) {
            return Err(MmuError::NotInGroup { caller, src });
        }
        let table = &self.tables[&src];
        let pages = match which {
            StealSet::All => table
                .entries
                .iter()
                .filter(|(_, m)| m.allow_steal)
                .map(|(&p, _)| p)
                .collect(),
            StealSet::Pages(list) => {
                let list = dedup(list);
                for &page in &list {
                    match table.entries.get(&page) {
                        None => return Err(MmuError::Unmapped(page)),
                        Some(m) if !m.allow_steal => return Err(MmuError::StealDisallowed(page)),
                        Some(_) => {}
                    }
                }
                list
            }
        };
        self.check_reachable(caller, &pages, src)?;
        Ok(self.move_pages(src, caller, &pages, true))
    }

    /// Keeps ownership but removes all access, clearing the element entry.
    /// `None` revokes every page the process holds.
    pub fn revoke(&mut self, pid: ProcessId, pages: Option<&[VirtualPage]>) -> Result<Effects, MmuError> {
        let proc = self.known(pid)?;
        let table = self.tables.get_mut(&pid).expect("known process has a table");
        let pages = match pages {
            None => table.entries.keys().copied().collect(),
            Some(list) => {
                let list = dedup(list);
                if let Some(&missing) = list.iter().find(|p| !table.entries.contains_key(p)) {
                    return Err(MmuError::Unmapped(missing));
                }
                list
            }
        };
        let mut fx = Effects::default();
        let mut cleared = Vec::new();
        for page in pages {
            let m = table.entries.get_mut(&page).expect("checked");
            if m.revoked.is_some() {
                continue;
            }
            m.revoked = Some(m.perms);
            m.perms = Perms::NONE;
            fx.updates.push((m.frame.element, ElementUpdate::Clear { pid, page }));
            cleared.push(page);
        }
        if !cleared.is_empty() {
            fx.invalidate.push((pid, proc.compute, cleared));
        }
        Ok(fx)
    }

    /// Provisions a successor for `dead` on `compute`, revokes everything
    /// `dead` holds and steals the stealable pages to the successor, as one
    /// step. With an initiator, the initiator must share a group with
    /// `dead`. The pair {dead, successor} is registered as a group.
    pub fn reincarnate(
        &mut self,
        initiator: Option<ProcessId>,
        dead: ProcessId,
        compute: ComputeId,
    ) -> Result<(ProcessId, Effects), MmuError> {
        self.known(dead)?;
        if !self.computes.contains_key(&compute) {
            return Err(MmuError::UnknownCompute(compute));
        }
        if let Some(by) = initiator {
            self.known(by)?;
            if !self.shares_group(by, dead) {
                return Err(MmuError::NotInGroup { caller: by, src: dead });
            }
        }
        let stealable: Vec<VirtualPage> = self.tables[&dead]
            .entries
            .iter()
            .filter(|(_, m)| m.allow_steal)
            .map(|(&p, _)| p)
            .collect();
        if stealable.is_empty() {
            return Err(MmuError::NothingToSteal(dead));
        }
        for &page in &stealable {
            let frame = self.tables[&dead].entries[&page].frame;
            if !self.is_reachable(compute, frame.element) {
                return Err(MmuError::Unreachable { page, compute });
            }
        }
        let new = self.provision(compute)?;
        self.register_group(&[dead, new]).expect("both registered");
        let mut fx = self.revoke(dead, None).expect("dead is known");
        let moved = self.move_pages(dead, new, &stealable, false);
        fx.updates.extend(moved.updates);
        fx.moved = moved.moved;
        Ok((new, fx))
    }

    /// Checks the table-level invariants: each frame in at most one table,
    /// reservations disjoint from entries, every entry reachable from its
    /// owner.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen: BTreeMap<FrameId, (ProcessId, VirtualPage)> = BTreeMap::new();
        for (&pid, t) in &self.tables {
            for (&page, m) in &t.entries {
                if let Some(prev) = seen.insert(m.frame, (pid, page)) {
                    return Err(format!("frame {} held by {} and {}", m.frame, prev.0, pid));
                }
                let compute = self.processes[&pid].compute;
                if !self.is_reachable(compute, m.frame.element) {
                    return Err(format!("{pid} maps {page} on unreachable {}", m.frame.element));
                }
            }
            if let Some(p) = t.reserved.iter().find(|p| t.entries.contains_key(p)) {
                return Err(format!("{pid} both reserves and maps {p}"));
            }
        }
        Ok(())
    }
}

fn dedup(pages: &[VirtualPage]) -> Vec<VirtualPage> {
    let mut seen = BTreeSet::new();
    pages.iter().copied().filter(|p| seen.insert(*p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: ProcessId = ProcessId::new(1);
    const P2: ProcessId = ProcessId::new(2);
    const P3: ProcessId = ProcessId::new(3);

    fn rack(frames: u32) -> RackMmu {
        let mut mmu = RackMmu::new();
        mmu.add_compute_element(ComputeId(0), RackId(0));
        mmu.add_compute_element(ComputeId(1), RackId(0));
        mmu.add_memory_element(MemId(0), RackId(0), frames);
        for p in [P1, P2, P3] {
            mmu.register_process(p, ComputeId(p.get() as u16 % 2)).unwrap();
        }
        mmu
    }

    fn page(pid: ProcessId, n: u64) -> VirtualPage {
        VirtualPage::new(pid, n).unwrap()
    }

    #[test]
    fn allocate_zero_is_noop() {
        let mut mmu = rack(4);
        assert_eq!(mmu.allocate(P1, 0, true).unwrap(), Effects::default());
        assert_eq!(mmu.free_frames(MemId(0)), 4);
    }

    #[test]
    fn first_fit_allocation() {
        let mut mmu = rack(4);
        let fx = mmu.allocate(P1, 2, true).unwrap();
        assert_eq!(fx.pages(), vec![page(P1, 0), page(P1, 1)]);
        assert_eq!(fx.frames(), vec![FrameId::new(MemId(0), 0), FrameId::new(MemId(0), 1)]);
        assert!(fx.updates.iter().all(|(_, u)| matches!(u, ElementUpdate::Set { zero: true, .. })));
    }

    #[test]
    fn first_fit_spills_to_next_element() {
        let mut mmu = rack(1);
        mmu.add_memory_element(MemId(1), RackId(0), 2);
        let fx = mmu.allocate(P1, 2, true).unwrap();
        assert_eq!(fx.frames(), vec![FrameId::new(MemId(0), 0), FrameId::new(MemId(1), 0)]);
    }

    #[test]
    fn exhaustion() {
        let mut mmu = rack(1);
        mmu.allocate(P1, 1, true).unwrap();
        assert_eq!(mmu.allocate(P1, 1, true), Err(MmuError::OutOfFrames { wanted: 1, free: 0 }));
    }

    #[test]
    fn failed_elements_are_skipped() {
        let mut mmu = rack(4);
        mmu.mark_element_failed(MemId(0));
        assert_eq!(mmu.allocate(P1, 1, true), Err(MmuError::NoReachableElement));
    }

    #[test]
    fn translate_follows_grant() {
        let mut mmu = rack(4);
        let fx = mmu.allocate(P1, 1, true).unwrap();
        let v = fx.pages()[0];
        assert_eq!(mmu.translate(P1, v.base()).unwrap().0, fx.frames()[0]);
        assert_eq!(mmu.translate(P2, v.base()), Err(MmuError::Unmapped(v)));

        let g = mmu.grant(P1, &[v], P2).unwrap();
        assert_eq!(mmu.translate(P1, v.base()), Err(MmuError::Unmapped(v)));
        assert_eq!(mmu.translate(P2, v.base()).unwrap().0, fx.frames()[0]);
        // clear for the old owner precedes the set for the new one
        assert_eq!(
            g.updates,
            vec![
                (MemId(0), ElementUpdate::Clear { pid: P1, page: v }),
                (MemId(0), ElementUpdate::Set { pid: P2, page: v, frame: 0, perms: Perms::READ_WRITE, zero: false }),
            ]
        );
        assert_eq!(g.invalidate, vec![(P1, ComputeId(1), vec![v])]);
        assert!(mmu.table(P1).unwrap().reserved.contains(&v));
        mmu.check_invariants().unwrap();
    }

    #[test]
    fn grant_errors() {
        let mut mmu = rack(4);
        let v = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        assert_eq!(mmu.grant(P1, &[], P2), Ok(Effects::default()));
        assert_eq!(mmu.grant(P1, &[v], P1), Err(MmuError::SelfGrant));
        assert_eq!(mmu.grant(P2, &[v], P1), Err(MmuError::Unmapped(v)));
        mmu.mark_dead(P2);
        assert_eq!(mmu.grant(P1, &[v], P2), Err(MmuError::DestinationDead(P2)));
    }

    #[test]
    fn page_returning_home_drops_reservation() {
        let mut mmu = rack(4);
        let v = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        mmu.grant(P1, &[v], P2).unwrap();
        mmu.grant(P2, &[v], P1).unwrap();
        assert!(!mmu.table(P1).unwrap().reserved.contains(&v));
        assert!(mmu.table(P2).unwrap().reserved.contains(&v));
        mmu.check_invariants().unwrap();
    }

    #[test]
    fn steal_requires_group() {
        let mut mmu = rack(4);
        mmu.allocate(P1, 3, true).unwrap();
        assert_eq!(
            mmu.steal(P2, P1, &StealSet::All),
            Err(MmuError::NotInGroup { caller: P2, src: P1 })
        );
        mmu.register_group(&[P1, P2, P3]).unwrap();
        mmu.mark_dead(P1);
        let fx = mmu.steal(P2, P1, &StealSet::All).unwrap();
        let got: Vec<_> = mmu.table(P2).unwrap().entries.keys().copied().collect();
        assert_eq!(got, vec![page(P1, 0), page(P1, 1), page(P1, 2)]);
        assert_eq!(fx.pages(), got);
    }

    #[test]
    fn steal_honors_flag() {
        let mut mmu = rack(4);
        let pinned = mmu.allocate(P1, 1, false).unwrap().pages()[0];
        let loose = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        mmu.register_group(&[P1, P2]).unwrap();
        assert_eq!(
            mmu.steal(P2, P1, &StealSet::Pages(vec![pinned])),
            Err(MmuError::StealDisallowed(pinned))
        );
        let fx = mmu.steal(P2, P1, &StealSet::All).unwrap();
        assert_eq!(fx.pages(), vec![loose]);
    }

    #[test]
    fn self_steal_is_noop() {
        let mut mmu = rack(4);
        mmu.allocate(P1, 2, true).unwrap();
        assert_eq!(mmu.steal(P1, P1, &StealSet::All), Ok(Effects::default()));
        assert_eq!(mmu.table(P1).unwrap().entries.len(), 2);
    }

    #[test]
    fn singleton_group() {
        let mut mmu = rack(4);
        mmu.allocate(P2, 1, true).unwrap();
        mmu.register_group(&[P1]).unwrap();
        assert!(mmu.steal(P1, P2, &StealSet::All).is_err());
        assert_eq!(
            mmu.register_group(&[P1, ProcessId::new(9)]),
            Err(MmuError::UnknownProcess(ProcessId::new(9)))
        );
    }

    #[test]
    fn revoke_then_steal_restores_perms() {
        let mut mmu = rack(4);
        let v = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        assert_eq!(mmu.revoke(P1, Some(&[])).unwrap(), Effects::default());
        let fx = mmu.revoke(P1, None).unwrap();
        assert_eq!(fx.updates, vec![(MemId(0), ElementUpdate::Clear { pid: P1, page: v })]);
        assert_eq!(mmu.translate(P1, v.base()), Err(MmuError::PermissionAbsent(v)));
        // a second revoke has nothing to clear
        assert!(mmu.revoke(P1, None).unwrap().updates.is_empty());
        mmu.register_group(&[P1, P2]).unwrap();
        let fx = mmu.steal(P2, P1, &StealSet::All).unwrap();
        // no second clear; the entry is already gone
        assert_eq!(fx.updates.len(), 1);
        assert_eq!(mmu.translate(P2, v.base()).unwrap().1, Perms::READ_WRITE);
    }

    #[test]
    fn reincarnate_moves_everything() {
        let mut mmu = rack(8);
        mmu.allocate(P1, 3, true).unwrap();
        mmu.register_group(&[P1, P2]).unwrap();
        mmu.mark_dead(P1);
        assert!(mmu.reincarnate(Some(P3), P1, ComputeId(0)).is_err());
        let (new, fx) = mmu.reincarnate(Some(P2), P1, ComputeId(0)).unwrap();
        assert_eq!(new, ProcessId::new(0));
        let clears = fx.updates.iter().filter(|(_, u)| matches!(u, ElementUpdate::Clear { .. })).count();
        assert_eq!(clears, 3);
        // all clears precede all sets
        let first_set = fx.updates.iter().position(|(_, u)| matches!(u, ElementUpdate::Set { .. })).unwrap();
        assert_eq!(first_set, 3);
        assert_eq!(mmu.table(new).unwrap().entries.len(), 3);
        assert_eq!(mmu.reincarnate(None, P1, ComputeId(0)), Err(MmuError::NothingToSteal(P1)));
        mmu.check_invariants().unwrap();
    }

    #[test]
    fn capability_soundness_brute_force() {
        // every (caller, src) over every subset-of-pairs group layout
        let pids = [P1, P2, P3];
        let pairs = [(P1, P2), (P1, P3), (P2, P3)];
        for mask in 0..8u32 {
            let mut mmu = rack(16);
            for &p in &pids {
                mmu.allocate(p, 1, true).unwrap();
            }
            for (i, &(a, b)) in pairs.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    mmu.register_group(&[a, b]).unwrap();
                }
            }
            for &caller in &pids {
                for &src in &pids {
                    let grouped = caller == src
                        || pairs.iter().enumerate().any(|(i, &(a, b))| {
                            mask & (1 << i) != 0 && ((a, b) == (caller, src) || (b, a) == (caller, src))
                        });
                    let mut trial = mmu.clone();
                    assert_eq!(trial.steal(caller, src, &StealSet::All).is_ok(), grouped);
                }
            }
        }
    }

    #[test]
    fn unreachable_destination_rejected() {
        let mut mmu = rack(4);
        mmu.add_compute_element(ComputeId(5), RackId(1));
        mmu.register_process(ProcessId::new(7), ComputeId(5)).unwrap();
        let v = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        assert!(matches!(mmu.grant(P1, &[v], ProcessId::new(7)), Err(MmuError::Unreachable { .. })));
    }

    #[test]
    fn injected_bug_skips_clear() {
        let mut mmu = rack(4);
        mmu.inject_bug(Some(InjectedBug::GrantSkipsClear));
        let v = mmu.allocate(P1, 1, true).unwrap().pages()[0];
        let fx = mmu.grant(P1, &[v], P2).unwrap();
        assert_eq!(fx.updates.len(), 1);
    }
}

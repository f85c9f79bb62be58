use std::collections::BTreeMap;

use crate::addr::{ProcessId, VirtualAddress, VirtualPage, PAGE_SIZE};
use crate::memory::AccessOp;
use crate::rack::Rack;

use super::HeapError;

/// Page-granular byte storage an arena lives in. Every call stays inside
/// one page and counts as one memory access.
pub trait PageMemory {
    fn read(&mut self, addr: VirtualAddress, len: usize) -> Result<Vec<u8>, HeapError>;
    fn write(&mut self, addr: VirtualAddress, data: &[u8]) -> Result<(), HeapError>;
}

fn check_span(addr: VirtualAddress, len: usize) {
    assert!(addr.offset() + len <= PAGE_SIZE, "access at {addr} of {len} bytes crosses a page");
}

/// Plain in-process pages, zero until written.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VecMemory {
    pages: BTreeMap<VirtualPage, Box<[u8]>>,
    writes: u64,
}

impl VecMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    /// Contents of every touched page, in page order.
    pub fn snapshot(&self) -> Vec<u8> {
        self.pages.values().flat_map(|p| p.iter().copied()).collect()
    }
}

impl PageMemory for VecMemory {
    fn read(&mut self, addr: VirtualAddress, len: usize) -> Result<Vec<u8>, HeapError> {
        check_span(addr, len);
        let off = addr.offset();
        Ok(match self.pages.get(&addr.page()) {
            Some(p) => p[off..off + len].to_vec(),
            None => vec![0; len],
        })
    }

    fn write(&mut self, addr: VirtualAddress, data: &[u8]) -> Result<(), HeapError> {
        check_span(addr, data.len());
        let off = addr.offset();
        let page = self.pages.entry(addr.page()).or_insert_with(|| vec![0; PAGE_SIZE].into_boxed_slice());
        page[off..off + data.len()].copy_from_slice(data);
        self.writes += 1;
        Ok(())
    }
}

/// Lets the first `budget` writes through, then fails every access as if
/// the writer had died at that point.
#[derive(Debug)]
pub struct CrashingMemory<'a, M> {
    inner: &'a mut M,
    budget: u64,
    crashed: bool,
}

impl<'a, M: PageMemory> CrashingMemory<'a, M> {
    pub fn new(inner: &'a mut M, budget: u64) -> Self {
        CrashingMemory { inner, budget, crashed: false }
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }
}

impl<M: PageMemory> PageMemory for CrashingMemory<'_, M> {
    fn read(&mut self, addr: VirtualAddress, len: usize) -> Result<Vec<u8>, HeapError> {
        if self.crashed {
            return Err(HeapError::Crashed);
        }
        self.inner.read(addr, len)
    }

    fn write(&mut self, addr: VirtualAddress, data: &[u8]) -> Result<(), HeapError> {
        if self.crashed || self.budget == 0 {
            self.crashed = true;
            return Err(HeapError::Crashed);
        }
        self.budget -= 1;
        self.inner.write(addr, data)
    }
}

/// A process's view of its pages in the simulated rack. Each access is
/// charged to the process as one interconnect round trip.
pub struct RackMemory<'a, N> {
    pub rack: &'a mut Rack<N>,
    pub pid: ProcessId,
}

impl<'a, N> RackMemory<'a, N> {
    pub fn new(rack: &'a mut Rack<N>, pid: ProcessId) -> Self {
        RackMemory { rack, pid }
    }
}

impl<N> PageMemory for RackMemory<'_, N> {
    fn read(&mut self, addr: VirtualAddress, len: usize) -> Result<Vec<u8>, HeapError> {
        Ok(self.rack.access_now(self.pid, addr, AccessOp::Read { len })?)
    }

    fn write(&mut self, addr: VirtualAddress, data: &[u8]) -> Result<(), HeapError> {
        self.rack.access_now(self.pid, addr, AccessOp::Write { data: data.to_vec() })?;
        Ok(())
    }
}

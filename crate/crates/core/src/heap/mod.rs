//! Crash-consistent heap arenas living in (possibly remote) pages.
//!
//! An arena is a list of pages addressed by arena offset: byte `o` is at
//! `pages[o / PAGE_SIZE]`, offset `o % PAGE_SIZE`. Its layout:
//!
//! ```text
//! page 0    0..4      magic "DDCH"
//!           4..6      version (u16 LE) = 1
//!           6..8      root map capacity (u16 LE) = 64
//!           8..12     page count (u32 LE)
//!           12..16    log pages (u32 LE)
//!           16..24    bump pointer, arena offset (u64 LE)
//!           24..28    tx state (u32 LE): 0 idle, 1 active
//!           28..32    reserved
//!           32..40    current tx id (u64 LE)
//!           40..64    reserved
//!           64..2112  root map: 64 entries of name[24] (NUL padded) + vaddr (u64 LE)
//! pages 1..=log_pages  undo log
//! rest                 bump-allocated objects
//! ```
//!
//! Undo records start at the beginning of page 1 and are packed; a record
//! that would not fit in the rest of a page starts at the next page
//! instead. Each record is a 32-byte header followed by the old bytes and
//! then the new bytes:
//!
//! ```text
//! 0..4    marker "ULOG"
//! 4..8    payload length n (u32 LE)
//! 8..16   tx id (u64 LE)
//! 16..20  sequence number within the tx (u32 LE), from 0
//! 20..24  reserved
//! 24..32  target arena offset (u64 LE)
//! 32..    old bytes [n], new bytes [n]
//! ```
//!
//! A record and its target never span pages, so each is one memory write.

mod memory;
pub mod sweep;

pub use memory::{CrashingMemory, PageMemory, RackMemory, VecMemory};

use thiserror::Error;

use crate::addr::{VirtualAddress, VirtualPage, PAGE_SIZE};
use crate::memory::Fault;

pub const MAGIC: [u8; 4] = *b"DDCH";
pub const VERSION: u16 = 1;
pub const ROOT_CAPACITY: usize = 64;
pub const ROOT_NAME_LEN: usize = 24;
pub const ROOT_ENTRY_LEN: usize = ROOT_NAME_LEN + 8;
pub const HEADER_LEN: usize = 64;
pub const ROOT_MAP_OFFSET: usize = HEADER_LEN;
pub const ROOT_MAP_LEN: usize = ROOT_CAPACITY * ROOT_ENTRY_LEN;
pub const LOG_MARKER: [u8; 4] = *b"ULOG";
pub const LOG_HEADER_LEN: usize = 32;
/// Largest undo payload that fits in one page with its header.
pub const MAX_RECORD_PAYLOAD: usize = (PAGE_SIZE - LOG_HEADER_LEN) / 2;

const OFF_PAGE_COUNT: usize = 8;
const OFF_BUMP: usize = 16;
const OFF_TX_STATE: usize = 24;
const TX_IDLE: u32 = 0;
const TX_ACTIVE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("corrupt arena: {0}")]
    CorruptArena(String),
    #[error("unknown root {0:?}")]
    UnknownRoot(String),
    #[error("root name {0:?} is empty or longer than 24 bytes")]
    BadRootName(String),
    #[error("root map is full")]
    RootMapFull,
    #[error("arena out of space: wanted {wanted} bytes, {free} free")]
    OutOfSpace { wanted: u64, free: u64 },
    #[error("address {0} is outside the arena")]
    OutsideArena(VirtualAddress),
    #[error("no transaction is active")]
    NoTransaction,
    #[error("a transaction is already active")]
    TransactionActive,
    #[error("memory fault: {0}")]
    Fault(Fault),
    /// Raised by [`CrashingMemory`] once its write budget is spent.
    #[error("crashed")]
    Crashed,
}

impl From<Fault> for HeapError {
    fn from(f: Fault) -> Self {
        HeapError::Fault(f)
    }
}

/// Order of the two writes inside `tx_write`. Only `LogFirst` is crash
/// consistent; `DataFirst` exists so the crash sweep can show it catches
/// the violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WriteOrder {
    #[default]
    LogFirst,
    DataFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tx {
    id: u64,
    seq: u32,
    cursor: u64,
}

#[derive(Debug, Clone)]
pub struct Arena {
    pages: Vec<VirtualPage>,
    log_pages: u32,
    bump: u64,
    last_tx: u64,
    tx: Option<Tx>,
    pub order: WriteOrder,
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes(b[o..o + 2].try_into().expect("2 bytes"))
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"))
}

fn page_size() -> u64 {
    PAGE_SIZE as u64
}

impl Arena {
    /// Writes a fresh header and empty root map. `pages` must be zeroed,
    /// hold at least `log_pages + 2` pages and be given in arena order.
    pub fn format<M: PageMemory>(mem: &mut M, pages: Vec<VirtualPage>, log_pages: u32) -> Result<Arena, HeapError> {
        if pages.len() < log_pages as usize + 2 {
            return Err(HeapError::CorruptArena(format!(
                "{} pages cannot hold {log_pages} log pages and data",
                pages.len()
            )));
        }
        let mut arena = Arena { pages, log_pages, bump: 0, last_tx: 0, tx: None, order: WriteOrder::LogFirst };
        arena.bump = arena.data_start();
        let mut header = vec![0u8; HEADER_LEN + ROOT_MAP_LEN];
        header[0..4].copy_from_slice(&MAGIC);
        header[4..6].copy_from_slice(&VERSION.to_le_bytes());
        header[6..8].copy_from_slice(&(ROOT_CAPACITY as u16).to_le_bytes());
        header[8..12].copy_from_slice(&(arena.pages.len() as u32).to_le_bytes());
        header[12..16].copy_from_slice(&log_pages.to_le_bytes());
        header[16..24].copy_from_slice(&arena.bump.to_le_bytes());
        mem.write(arena.pages[0].base(), &header)?;
        Ok(arena)
    }

    /// Rebuilds an arena from its pages alone, rolling back an interrupted
    /// transaction. Extra pages beyond the recorded count are ignored.
    /// Idempotent: a crash during recovery is repaired by recovering again.
    pub fn recover<M: PageMemory>(mem: &mut M, mut pages: Vec<VirtualPage>) -> Result<Arena, HeapError> {
        pages.sort();
        let first = *pages.first().ok_or_else(|| HeapError::CorruptArena("no pages".into()))?;
        let header = mem.read(first.base(), HEADER_LEN)?;
        if header[0..4] != MAGIC {
            return Err(HeapError::CorruptArena("bad magic".into()));
        }
        let version = u16_at(&header, 4);
        if version != VERSION {
            return Err(HeapError::CorruptArena(format!("unsupported version {version}")));
        }
        if u16_at(&header, 6) as usize != ROOT_CAPACITY {
            return Err(HeapError::CorruptArena("unexpected root map capacity".into()));
        }
        let count = u32_at(&header, OFF_PAGE_COUNT) as usize;
        let log_pages = u32_at(&header, 12);
        if count > pages.len() || count < log_pages as usize + 2 {
            return Err(HeapError::CorruptArena(format!("header claims {count} pages, {} given", pages.len())));
        }
        pages.truncate(count);
        let state = u32_at(&header, OFF_TX_STATE);
        let tx_id = u64_at(&header, 32);
        let mut arena = Arena { pages, log_pages, bump: 0, last_tx: tx_id, tx: None, order: WriteOrder::LogFirst };
        match state {
            TX_IDLE => {}
            TX_ACTIVE => {
                let records = arena.scan_log(mem, tx_id)?;
                for (target, old, _) in records.iter().rev() {
                    arena.write_raw(mem, *target, old)?;
                }
                mem.write(arena.at(OFF_TX_STATE as u64), &TX_IDLE.to_le_bytes())?;
            }
            other => return Err(HeapError::CorruptArena(format!("bad tx state {other}"))),
        }
        let header = mem.read(first.base(), HEADER_LEN)?;
        arena.bump = u64_at(&header, OFF_BUMP);
        if arena.bump < arena.data_start() || arena.bump > arena.capacity() {
            return Err(HeapError::CorruptArena(format!("bump pointer {} out of range", arena.bump)));
        }
        Ok(arena)
    }

    /// Records of `tx_id` in log order: (target, old bytes, new bytes).
    fn scan_log<M: PageMemory>(&self, mem: &mut M, tx_id: u64) -> Result<Vec<(u64, Vec<u8>, Vec<u8>)>, HeapError> {
        let mut out = Vec::new();
        let mut pos = self.log_start();
        let end = self.log_end();
        let mut retried = false;
        while pos + LOG_HEADER_LEN as u64 <= end {
            let room = page_size() - pos % page_size();
            let found = if room >= LOG_HEADER_LEN as u64 {
                let h = mem.read(self.at(pos), LOG_HEADER_LEN)?;
                let n = u32_at(&h, 4) as usize;
                let ok = h[0..4] == LOG_MARKER
                    && u64_at(&h, 8) == tx_id
                    && u32_at(&h, 16) as usize == out.len()
                    && n <= MAX_RECORD_PAYLOAD
                    && (LOG_HEADER_LEN + 2 * n) as u64 <= room;
                ok.then(|| (n, u64_at(&h, 24)))
            } else {
                None
            };
            match found {
                Some((n, target)) => {
                    let body = mem.read(self.at(pos + LOG_HEADER_LEN as u64), 2 * n)?;
                    if target + n as u64 > self.capacity() {
                        return Err(HeapError::CorruptArena(format!("log record targets {target}")));
                    }
                    out.push((target, body[..n].to_vec(), body[n..].to_vec()));
                    pos += (LOG_HEADER_LEN + 2 * n) as u64;
                    retried = false;
                }
                None if !retried && pos % page_size() != 0 => {
                    pos = (pos / page_size() + 1) * page_size();
                    retried = true;
                }
                None => break,
            }
        }
        Ok(out)
    }

    pub fn pages(&self) -> &[VirtualPage] {
        &self.pages
    }

    pub fn log_pages(&self) -> u32 {
        self.log_pages
    }

    pub fn capacity(&self) -> u64 {
        self.pages.len() as u64 * page_size()
    }

    fn log_start(&self) -> u64 {
        page_size()
    }

    fn log_end(&self) -> u64 {
        (1 + u64::from(self.log_pages)) * page_size()
    }

    /// First arena offset available to the allocator.
    pub fn data_start(&self) -> u64 {
        self.log_end()
    }

    pub fn bump(&self) -> u64 {
        self.bump
    }

    pub fn in_transaction(&self) -> bool {
        self.tx.is_some()
    }

    /// Address of an arena offset.
    pub fn at(&self, offset: u64) -> VirtualAddress {
        let page = self.pages[(offset / page_size()) as usize];
        page.at((offset % page_size()) as usize)
    }

    /// Arena offset of an address.
    pub fn offset_of(&self, addr: VirtualAddress) -> Result<u64, HeapError> {
        let idx = self.pages.iter().position(|&p| p == addr.page()).ok_or(HeapError::OutsideArena(addr))?;
        Ok(idx as u64 * page_size() + addr.offset() as u64)
    }

    /// Splits `[offset, offset + len)` at page boundaries.
    fn chunks(offset: u64, len: usize, max: usize) -> impl Iterator<Item = (u64, usize, usize)> {
        let mut done = 0usize;
        std::iter::from_fn(move || {
            if done >= len {
                return None;
            }
            let at = offset + done as u64;
            let room = (page_size() - at % page_size()) as usize;
            let n = room.min(len - done).min(max);
            let item = (at, done, n);
            done += n;
            Some(item)
        })
    }

    fn check_range(&self, offset: u64, len: usize) -> Result<(), HeapError> {
        if offset.checked_add(len as u64).is_none_or(|end| end > self.capacity()) {
            return Err(HeapError::OutsideArena(self.at(offset.min(self.capacity().saturating_sub(1)))));
        }
        Ok(())
    }

    /// Transactions may touch the data region, the root map and the bump
    /// pointer, nothing else.
    fn writable(&self, offset: u64, len: usize) -> bool {
        let end = offset + len as u64;
        let roots = ROOT_MAP_OFFSET as u64..(ROOT_MAP_OFFSET + ROOT_MAP_LEN) as u64;
        offset >= self.data_start()
            || (roots.contains(&offset) && end <= roots.end)
            || (offset == OFF_BUMP as u64 && len == 8)
    }

    pub fn read_at<M: PageMemory>(&self, mem: &mut M, offset: u64, len: usize) -> Result<Vec<u8>, HeapError> {
        self.check_range(offset, len)?;
        let mut out = Vec::with_capacity(len);
        for (at, _, n) in Self::chunks(offset, len, PAGE_SIZE) {
            out.extend(mem.read(self.at(at), n)?);
        }
        Ok(out)
    }

    pub fn read<M: PageMemory>(&self, mem: &mut M, addr: VirtualAddress, len: usize) -> Result<Vec<u8>, HeapError> {
        self.read_at(mem, self.offset_of(addr)?, len)
    }

    fn write_raw<M: PageMemory>(&self, mem: &mut M, offset: u64, data: &[u8]) -> Result<(), HeapError> {
        for (at, from, n) in Self::chunks(offset, data.len(), PAGE_SIZE) {
            mem.write(self.at(at), &data[from..from + n])?;
        }
        Ok(())
    }

    pub fn begin<M: PageMemory>(&mut self, mem: &mut M) -> Result<(), HeapError> {
        if self.tx.is_some() {
            return Err(HeapError::TransactionActive);
        }
        let id = self.last_tx + 1;
        let mut b = [0u8; 16];
        b[0..4].copy_from_slice(&TX_ACTIVE.to_le_bytes());
        b[8..16].copy_from_slice(&id.to_le_bytes());
        mem.write(self.at(OFF_TX_STATE as u64), &b)?;
        self.last_tx = id;
        self.tx = Some(Tx { id, seq: 0, cursor: self.log_start() });
        Ok(())
    }

    /// Logs the old contents of the target range, then overwrites it.
    pub fn write_at<M: PageMemory>(&mut self, mem: &mut M, offset: u64, data: &[u8]) -> Result<(), HeapError> {
        let Some(mut tx) = self.tx else { return Err(HeapError::NoTransaction) };
        self.check_range(offset, data.len())?;
        if !self.writable(offset, data.len()) {
            return Err(HeapError::OutsideArena(self.at(offset)));
        }
        for (at, from, n) in Self::chunks(offset, data.len(), MAX_RECORD_PAYLOAD) {
            let new = &data[from..from + n];
            let old = mem.read(self.at(at), n)?;
            let need = (LOG_HEADER_LEN + 2 * n) as u64;
            if page_size() - tx.cursor % page_size() < need {
                tx.cursor = (tx.cursor / page_size() + 1) * page_size();
            }
            if tx.cursor + need > self.log_end() {
                return Err(HeapError::OutOfSpace { wanted: need, free: self.log_end().saturating_sub(tx.cursor) });
            }
            let mut rec = Vec::with_capacity(need as usize);
            rec.extend_from_slice(&LOG_MARKER);
            rec.extend_from_slice(&(n as u32).to_le_bytes());
            rec.extend_from_slice(&tx.id.to_le_bytes());
            rec.extend_from_slice(&tx.seq.to_le_bytes());
            rec.extend_from_slice(&[0; 4]);
            rec.extend_from_slice(&at.to_le_bytes());
            rec.extend_from_slice(&old);
            rec.extend_from_slice(new);
            match self.order {
                WriteOrder::LogFirst => {
                    mem.write(self.at(tx.cursor), &rec)?;
                    mem.write(self.at(at), new)?;
                }
                WriteOrder::DataFirst => {
                    mem.write(self.at(at), new)?;
                    mem.write(self.at(tx.cursor), &rec)?;
                }
            }
            tx.cursor += need;
            tx.seq += 1;
            self.tx = Some(tx);
        }
        Ok(())
    }

    pub fn write<M: PageMemory>(&mut self, mem: &mut M, addr: VirtualAddress, data: &[u8]) -> Result<(), HeapError> {
        let offset = self.offset_of(addr)?;
        self.write_at(mem, offset, data)
    }

    pub fn commit<M: PageMemory>(&mut self, mem: &mut M) -> Result<(), HeapError> {
        if self.tx.is_none() {
            return Err(HeapError::NoTransaction);
        }
        mem.write(self.at(OFF_TX_STATE as u64), &TX_IDLE.to_le_bytes())?;
        self.tx = None;
        Ok(())
    }

    /// Runs `f` inside a transaction and commits if it succeeds. On error
    /// the transaction is left open; the arena must be recovered.
    pub fn transaction<M, T, F>(&mut self, mem: &mut M, f: F) -> Result<T, HeapError>
    where
        M: PageMemory,
        F: FnOnce(&mut Arena, &mut M) -> Result<T, HeapError>,
    {
        self.begin(mem)?;
        let out = f(self, mem)?;
        self.commit(mem)?;
        Ok(out)
    }

    /// Bump-allocates `size` bytes (8-byte aligned) inside the current
    /// transaction.
    pub fn alloc<M: PageMemory>(&mut self, mem: &mut M, size: u64) -> Result<VirtualAddress, HeapError> {
        let start = self.bump.next_multiple_of(8);
        let end = start + size;
        if end > self.capacity() {
            return Err(HeapError::OutOfSpace { wanted: size, free: self.capacity().saturating_sub(start) });
        }
        self.write_at(mem, OFF_BUMP as u64, &end.to_le_bytes())?;
        self.bump = end;
        Ok(self.at(start))
    }

    fn root_entries<M: PageMemory>(&self, mem: &mut M) -> Result<Vec<u8>, HeapError> {
        self.read_at(mem, ROOT_MAP_OFFSET as u64, ROOT_MAP_LEN)
    }

    fn encode_name(name: &str) -> Result<[u8; ROOT_NAME_LEN], HeapError> {
        let b = name.as_bytes();
        if b.is_empty() || b.len() > ROOT_NAME_LEN || b.contains(&0) {
            return Err(HeapError::BadRootName(name.to_string()));
        }
        let mut out = [0u8; ROOT_NAME_LEN];
        out[..b.len()].copy_from_slice(b);
        Ok(out)
    }

    /// Sets a named root inside the current transaction.
    pub fn set_root<M: PageMemory>(&mut self, mem: &mut M, name: &str, vaddr: VirtualAddress) -> Result<(), HeapError> {
        let key = Self::encode_name(name)?;
        let map = self.root_entries(mem)?;
        let slot = (0..ROOT_CAPACITY)
            .find(|&i| map[i * ROOT_ENTRY_LEN..i * ROOT_ENTRY_LEN + ROOT_NAME_LEN] == key)
            .or_else(|| (0..ROOT_CAPACITY).find(|&i| map[i * ROOT_ENTRY_LEN] == 0))
            .ok_or(HeapError::RootMapFull)?;
        let mut entry = [0u8; ROOT_ENTRY_LEN];
        entry[..ROOT_NAME_LEN].copy_from_slice(&key);
        entry[ROOT_NAME_LEN..].copy_from_slice(&vaddr.raw().to_le_bytes());
        self.write_at(mem, (ROOT_MAP_OFFSET + slot * ROOT_ENTRY_LEN) as u64, &entry)
    }

    pub fn get_root<M: PageMemory>(&self, mem: &mut M, name: &str) -> Result<VirtualAddress, HeapError> {
        let key = Self::encode_name(name).map_err(|_| HeapError::UnknownRoot(name.to_string()))?;
        let map = self.root_entries(mem)?;
        let i = (0..ROOT_CAPACITY)
            .find(|&i| map[i * ROOT_ENTRY_LEN..i * ROOT_ENTRY_LEN + ROOT_NAME_LEN] == key)
            .ok_or_else(|| HeapError::UnknownRoot(name.to_string()))?;
        let raw = u64_at(&map, i * ROOT_ENTRY_LEN + ROOT_NAME_LEN);
        VirtualAddress::from_raw(raw).map_err(|e| HeapError::CorruptArena(e.to_string()))
    }

    /// All roots in slot order.
    pub fn roots<M: PageMemory>(&self, mem: &mut M) -> Result<Vec<(String, VirtualAddress)>, HeapError> {
        let map = self.root_entries(mem)?;
        let mut out = Vec::new();
        for i in 0..ROOT_CAPACITY {
            let e = &map[i * ROOT_ENTRY_LEN..(i + 1) * ROOT_ENTRY_LEN];
            if e[0] == 0 {
                continue;
            }
            let len = e[..ROOT_NAME_LEN].iter().position(|&b| b == 0).unwrap_or(ROOT_NAME_LEN);
            let name = String::from_utf8_lossy(&e[..len]).into_owned();
            let addr = VirtualAddress::from_raw(u64_at(e, ROOT_NAME_LEN)).map_err(|e| HeapError::CorruptArena(e.to_string()))?;
            out.push((name, addr));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::ProcessId;

    const P: ProcessId = ProcessId::new(3);

    fn pages(n: u64) -> Vec<VirtualPage> {
        (0..n).map(|i| VirtualPage::new(P, 10 + i).unwrap()).collect()
    }

    fn fresh(n: u64, log: u32) -> (VecMemory, Arena) {
        let mut mem = VecMemory::new();
        let a = Arena::format(&mut mem, pages(n), log).unwrap();
        (mem, a)
    }

    #[test]
    fn header_is_bit_exact() {
        let (mut mem, a) = fresh(4, 1);
        let h = mem.read(a.at(0), 64).unwrap();
        let mut want = vec![0u8; 64];
        want[0..4].copy_from_slice(b"DDCH");
        want[4] = 1;
        want[6] = 64;
        want[8] = 4;
        want[12] = 1;
        want[16..24].copy_from_slice(&(2 * 4096u64).to_le_bytes());
        assert_eq!(h, want);
        assert_eq!(a.data_start(), 8192);
    }

    #[test]
    fn empty_transaction_changes_nothing_but_the_tx_id() {
        let (mut mem, mut a) = fresh(4, 1);
        let before = mem.snapshot();
        a.transaction(&mut mem, |_, _| Ok(())).unwrap();
        let after = mem.snapshot();
        let differing: Vec<_> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        // only the tx id at 32..40 of page 0 moved
        assert!(differing.iter().all(|&i| (32..40).contains(&i)), "{differing:?}");
    }

    #[test]
    fn log_record_layout() {
        let (mut mem, mut a) = fresh(4, 1);
        a.begin(&mut mem).unwrap();
        let target = a.data_start() + 5;
        a.write_at(&mut mem, target, b"new").unwrap();
        let rec = mem.read(a.at(4096), 38).unwrap();
        assert_eq!(&rec[0..4], b"ULOG");
        assert_eq!(u32_at(&rec, 4), 3);
        assert_eq!(u64_at(&rec, 8), 1);
        assert_eq!(u32_at(&rec, 16), 0);
        assert_eq!(u64_at(&rec, 24), target);
        assert_eq!(&rec[32..35], &[0, 0, 0]);
        assert_eq!(&rec[35..38], b"new");
    }

    #[test]
    fn uncommitted_write_rolls_back() {
        let (mut mem, mut a) = fresh(4, 1);
        let v = a.transaction(&mut mem, |a, m| {
            let v = a.alloc(m, 16)?;
            a.write(m, v, b"committed")?;
            Ok(v)
        })
        .unwrap();
        a.begin(&mut mem).unwrap();
        a.write(&mut mem, v, b"torn-data").unwrap();
        let r = Arena::recover(&mut mem, pages(4)).unwrap();
        assert_eq!(r.read(&mut mem, v, 9).unwrap(), b"committed");
        assert_eq!(r.bump(), a.bump());
        assert!(!r.in_transaction());
    }

    #[test]
    fn recovery_is_idempotent() {
        let (mut mem, mut a) = fresh(4, 1);
        a.begin(&mut mem).unwrap();
        a.write_at(&mut mem, 9000, &[9; 100]).unwrap();
        Arena::recover(&mut mem, pages(4)).unwrap();
        let once = mem.snapshot();
        Arena::recover(&mut mem, pages(4)).unwrap();
        assert_eq!(once, mem.snapshot());
        assert_eq!(mem.read(a.at(9000), 100).unwrap(), vec![0; 100]);
    }

    #[test]
    fn clean_recovery_changes_nothing() {
        let (mut mem, mut a) = fresh(4, 1);
        a.transaction(&mut mem, |a, m| a.write_at(m, 9000, b"x")).unwrap();
        let before = mem.snapshot();
        Arena::recover(&mut mem, pages(4)).unwrap();
        assert_eq!(before, mem.snapshot());
    }

    #[test]
    fn large_and_page_crossing_writes() {
        // 96 + 2032 + 1968 + 904 bytes: four records, each on its own page
        let (mut mem, mut a) = fresh(8, 4);
        let start = a.data_start() + 4000;
        let data: Vec<u8> = (0..5000u32).map(|i| (i % 251) as u8).collect();
        a.begin(&mut mem).unwrap();
        a.write_at(&mut mem, start, &data).unwrap();
        assert_eq!(a.read_at(&mut mem, start, data.len()).unwrap(), data);
        Arena::recover(&mut mem, pages(8)).unwrap();
        assert_eq!(a.read_at(&mut mem, start, data.len()).unwrap(), vec![0; 5000]);
    }

    #[test]
    fn log_overflow_is_reported() {
        let (mut mem, mut a) = fresh(4, 1);
        a.begin(&mut mem).unwrap();
        a.write_at(&mut mem, 8192, &[1; 2000]).unwrap();
        let err = a.write_at(&mut mem, 8192 + 2000, &[1; 2000]).unwrap_err();
        assert!(matches!(err, HeapError::OutOfSpace { .. }));
    }

    #[test]
    fn roots() {
        let (mut mem, mut a) = fresh(4, 1);
        let v = a.at(9000);
        a.transaction(&mut mem, |a, m| a.set_root(m, "log_head", v)).unwrap();
        assert_eq!(a.get_root(&mut mem, "log_head").unwrap(), v);
        assert_eq!(a.get_root(&mut mem, "nope"), Err(HeapError::UnknownRoot("nope".into())));
        assert!(matches!(a.set_root(&mut mem, &"x".repeat(25), v), Err(HeapError::BadRootName(_))));
        let w = a.at(9100);
        a.transaction(&mut mem, |a, m| a.set_root(m, "log_head", w)).unwrap();
        assert_eq!(a.roots(&mut mem).unwrap(), vec![("log_head".to_string(), w)]);
    }

    #[test]
    fn root_map_fills() {
        let (mut mem, mut a) = fresh(4, 1);
        let v = a.at(9000);
        for i in 0..ROOT_CAPACITY {
            a.transaction(&mut mem, |a, m| a.set_root(m, &format!("r{i}"), v)).unwrap();
        }
        assert_eq!(a.transaction(&mut mem, |a, m| a.set_root(m, "one-more", v)), Err(HeapError::RootMapFull));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let mut mem = VecMemory::new();
        assert!(matches!(Arena::recover(&mut mem, pages(4)), Err(HeapError::CorruptArena(_))));
    }

    #[test]
    fn writes_outside_data_and_roots_are_refused() {
        let (mut mem, mut a) = fresh(4, 1);
        a.begin(&mut mem).unwrap();
        assert!(a.write_at(&mut mem, 4096, b"log").is_err());
        assert!(a.write_at(&mut mem, 0, b"hdr").is_err());
        assert!(a.write_at(&mut mem, a.capacity() - 1, b"ab").is_err());
    }
}

//! Crash-point sweep: run a transactional workload, crash it after every
//! possible number of memory writes, recover, and compare against a
//! sequential oracle that applies whole committed transactions to a plain
//! byte image.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{ProcessId, VirtualPage};
use crate::rack::{Origin, Rack, RackConfig};
use crate::trace::SimTrace;

use super::{Arena, CrashingMemory, HeapError, PageMemory, RackMemory, VecMemory, WriteOrder};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// Overwrite bytes at an offset into the data region.
    Write { offset: u64, bytes: Vec<u8> },
    Alloc { size: u64 },
    SetRoot { name: String, offset: u64 },
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub pages: u64,
    pub log_pages: u32,
    pub txs: Vec<Vec<Op>>,
}

const ROOT_NAMES: [&str; 4] = ["log_head", "progress", "meta", "index"];

impl Workload {
    /// A seeded mix of small writes, page-crossing writes larger than one
    /// log record, allocations and root updates.
    pub fn generate(seed: u64, txs: usize) -> Workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pages = 8;
        let log_pages = 4;
        let data_len = (pages - 1 - u64::from(log_pages)) * 4096;
        let mut out = Vec::with_capacity(txs);
        for _ in 0..txs {
            let n = rng.gen_range(0..=3);
            let mut ops = Vec::new();
            let mut large = false;
            for _ in 0..n {
                let op = match rng.gen_range(0..10) {
                    0..=5 => {
                        let len = if !large && rng.gen_bool(0.25) {
                            large = true;
                            rng.gen_range(1000..3000)
                        } else {
                            rng.gen_range(1..64)
                        };
                        let offset = rng.gen_range(0..data_len - len);
                        let bytes = (0..len).map(|_| rng.gen()).collect();
                        Op::Write { offset, bytes }
                    }
                    6 | 7 => Op::Alloc { size: rng.gen_range(1..48) },
                    _ => Op::SetRoot {
                        name: ROOT_NAMES[rng.gen_range(0..ROOT_NAMES.len())].to_string(),
                        offset: rng.gen_range(0..data_len),
                    },
                };
                ops.push(op);
            }
            out.push(ops);
        }
        Workload { pages, log_pages, txs: out }
    }

    pub fn page_list(&self) -> Vec<VirtualPage> {
        let pid = ProcessId::new(1);
        (0..self.pages).map(|i| VirtualPage::new(pid, 100 + i).expect("small page numbers")).collect()
    }
}

/// What an arena holds, as far as the workload can observe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapState {
    pub data: Vec<u8>,
    pub roots: BTreeMap<String, u64>,
    pub bump: u64,
}

/// Oracle states after 0, 1, ..., n committed transactions.
pub fn oracle(w: &Workload) -> Vec<HeapState> {
    let data_start = (1 + u64::from(w.log_pages)) * 4096;
    let data_len = (w.pages * 4096 - data_start) as usize;
    let mut s = HeapState { data: vec![0; data_len], roots: BTreeMap::new(), bump: data_start };
    let mut out = vec![s.clone()];
    for tx in &w.txs {
        for op in tx {
            match op {
                Op::Write { offset, bytes } => {
                    let o = *offset as usize;
                    s.data[o..o + bytes.len()].copy_from_slice(bytes);
                }
                Op::Alloc { size } => s.bump = s.bump.div_ceil(8) * 8 + size,
                Op::SetRoot { name, offset } => {
                    s.roots.insert(name.clone(), *offset);
                }
            }
        }
        out.push(s.clone());
    }
    out
}

fn observe<M: PageMemory>(mem: &mut M, arena: &Arena) -> Result<HeapState, HeapError> {
    let start = arena.data_start();
    let data = arena.read_at(mem, start, (arena.capacity() - start) as usize)?;
    let mut roots = BTreeMap::new();
    for (name, addr) in arena.roots(mem)? {
        roots.insert(name, arena.offset_of(addr)? - start);
    }
    Ok(HeapState { data, roots, bump: arena.bump() })
}

/// Runs the workload; returns how many transactions committed before the
/// memory gave out (or all of them).
pub fn execute<M: PageMemory>(mem: &mut M, arena: &mut Arena, w: &Workload) -> (usize, Result<(), HeapError>) {
    let start = arena.data_start();
    for (i, tx) in w.txs.iter().enumerate() {
        let r = arena.transaction(mem, |a, m| {
            for op in tx {
                match op {
                    Op::Write { offset, bytes } => a.write_at(m, start + offset, bytes)?,
                    Op::Alloc { size } => {
                        a.alloc(m, *size)?;
                    }
                    Op::SetRoot { name, offset } => {
                        let v = a.at(start + offset);
                        a.set_root(m, name, v)?;
                    }
                }
            }
            Ok(())
        });
        if let Err(e) = r {
            return (i, Err(e));
        }
    }
    (w.txs.len(), Ok(()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepFailure {
    pub crash_after_writes: u64,
    pub committed: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub transactions: usize,
    pub total_writes: u64,
    pub crash_points: u64,
    pub failures: Vec<SweepFailure>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Crashes the workload after every write count from 0 to the total,
/// recovers (also crashing the first recovery a few writes in), and checks
/// the result against the oracle for the transactions that committed.
pub fn crash_sweep(w: &Workload, order: WriteOrder) -> SweepReport {
    let expected = oracle(w);
    let mut base = VecMemory::new();
    let mut formatted = Arena::format(&mut base, w.page_list(), w.log_pages).expect("workload fits");
    formatted.order = order;
    let total = {
        let mut mem = base.clone();
        let mut arena = formatted.clone();
        let (n, r) = execute(&mut mem, &mut arena, w);
        assert!(r.is_ok() && n == w.txs.len(), "uncrashed workload must complete: {r:?}");
        mem.writes() - base.writes()
    };
    let mut failures = Vec::new();
    for budget in 0..=total {
        let mut mem = base.clone();
        let mut arena = formatted.clone();
        let committed = {
            let mut crashing = CrashingMemory::new(&mut mem, budget);
            execute(&mut crashing, &mut arena, w).0
        };
        let mut fail = |detail: String| failures.push(SweepFailure { crash_after_writes: budget, committed, detail });
        // an interrupted recovery must itself be recoverable
        for recovery_budget in [1, 3] {
            let mut c = CrashingMemory::new(&mut mem, recovery_budget);
            let _ = Arena::recover(&mut c, w.page_list());
        }
        let recovered = match Arena::recover(&mut mem, w.page_list()) {
            Ok(a) => a,
            Err(e) => {
                fail(format!("recover failed: {e}"));
                continue;
            }
        };
        let once = mem.clone();
        if Arena::recover(&mut mem, w.page_list()).is_err() || once != mem {
            fail("recovery is not idempotent".into());
        }
        match observe(&mut mem, &recovered) {
            Ok(state) if state == expected[committed] => {}
            Ok(state) => {
                let first = state.data.iter().zip(&expected[committed].data).position(|(a, b)| a != b);
                fail(format!(
                    "state differs from oracle prefix {committed} (first data byte {first:?}, roots {}, bump {} vs {})",
                    if state.roots == expected[committed].roots { "equal" } else { "differ" },
                    state.bump,
                    expected[committed].bump
                ));
            }
            Err(e) => fail(format!("observe failed: {e}")),
        }
    }
    SweepReport { transactions: w.txs.len(), total_writes: total, crash_points: total + 1, failures }
}

#[derive(Debug, Clone, Serialize)]
pub struct RackRun {
    pub committed: usize,
    pub matches_oracle: bool,
    pub finished_at: crate::time::SimTime,
}

/// Runs the workload uncrashed by one process in a simulated rack, so every
/// log and data write is a traced memory access, and compares the final
/// arena with the oracle.
pub fn run_on_rack(w: &Workload, order: WriteOrder, config: RackConfig) -> Result<(RackRun, SimTrace), String> {
    let mut rack: Rack<()> = Rack::new(config.clone())?;
    let pid = rack.spawn(config.compute(0, 0), Origin::Initial { role: 0 }).map_err(|e| e.to_string())?;
    let pages = rack.alloc_now(pid, w.pages as usize, false).map_err(|e| e.to_string())?;
    let mut mem = RackMemory::new(&mut rack, pid);
    let mut arena = Arena::format(&mut mem, pages, w.log_pages).map_err(|e| e.to_string())?;
    arena.order = order;
    let (committed, r) = execute(&mut mem, &mut arena, w);
    r.map_err(|e| e.to_string())?;
    let state = observe(&mut mem, &arena).map_err(|e| e.to_string())?;
    let matches_oracle = oracle(w).last() == Some(&state);
    let finished_at = rack.busy_until(pid);
    Ok((RackRun { committed, matches_oracle, finished_at }, rack.take_trace()))
}

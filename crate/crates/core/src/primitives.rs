//! Random grant/steal/revoke/failure scripts over a few processes, checked
//! against an independent ownership model after every step.
//!
//! Properties checked:
//! - single owner: no frame is open to two processes at its element, and no
//!   page sits in two page tables;
//! - address stability: a moved page keeps its virtual address and the new
//!   owner reads it there;
//! - content preservation: the bytes read back are the last bytes written;
//! - capability soundness: a steal or revoke only succeeds within a group;
//! - revoke before reassign: at every element, a frame's entry for the old
//!   owner is cleared before one for the new owner is set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{FrameId, MemId, ProcessId, VirtualPage};
use crate::latency::{LatencyModel, Profile};
use crate::memory::{AccessOp, FailureMode};
use crate::mmu::{InjectedBug, MmuError, StealSet};
use crate::os::SignalKind;
use crate::rack::{App, AppEvent, Injection, Origin, Rack, RackConfig, ReqId, SysReply};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

const TAG_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrimitivesParams {
    pub processes: u8,
    pub pages_per_process: usize,
    pub ops: usize,
}

impl Default for PrimitivesParams {
    fn default() -> Self {
        PrimitivesParams { processes: 4, pages_per_process: 32, ops: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    SingleOwner,
    AddressStability,
    ContentPreservation,
    CapabilitySoundness,
    RevokeBeforeReassign,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::SingleOwner,
        Property::AddressStability,
        Property::ContentPreservation,
        Property::CapabilitySoundness,
        Property::RevokeBeforeReassign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::SingleOwner => "single-owner",
            Property::AddressStability => "address-stability",
            Property::ContentPreservation => "content-preservation",
            Property::CapabilitySoundness => "capability-soundness",
            Property::RevokeBeforeReassign => "revoke-before-reassign",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub property: Property,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.property.name(), self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrimitivesOutcome {
    pub seed: u64,
    pub steps: Vec<String>,
    pub violations: Vec<Violation>,
}

impl PrimitivesOutcome {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, property: Property) -> bool {
        self.violations.iter().any(|v| v.property == property)
    }
}

#[derive(Default)]
struct Replies {
    done: BTreeMap<(ProcessId, ReqId), Result<SysReply, MmuError>>,
}

impl App<()> for Replies {
    fn on_event(&mut self, _rack: &mut Rack<()>, pid: ProcessId, ev: AppEvent<()>) {
        if let AppEvent::SyscallDone { req, result } = ev {
            self.done.insert((pid, req), result);
        }
    }
}

/// What the script believes about each page.
#[derive(Debug, Clone)]
struct PageModel {
    owner: ProcessId,
    allow_steal: bool,
    revoked: bool,
    element: MemId,
    content: Vec<u8>,
}

struct Harness {
    rack: Rack<()>,
    app: Replies,
    rng: ChaCha8Rng,
    pids: Vec<ProcessId>,
    pages: BTreeMap<VirtualPage, PageModel>,
    groups: Vec<BTreeSet<ProcessId>>,
    dead: BTreeSet<ProcessId>,
    failed: BTreeSet<MemId>,
    version: u64,
    steps: Vec<String>,
    violations: Vec<Violation>,
}

impl Harness {
    fn flag(&mut self, property: Property, detail: String) {
        self.violations.push(Violation { property, detail });
    }

    fn grouped(&self, a: ProcessId, b: ProcessId) -> bool {
        a == b || self.groups.iter().any(|g| g.contains(&a) && g.contains(&b))
    }

    fn tag(&mut self, page: VirtualPage) -> Vec<u8> {
        self.version += 1;
        let mut out = Vec::with_capacity(TAG_LEN);
        out.extend_from_slice(&page.number().to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        while out.len() < TAG_LEN {
            out.push(self.rng.gen());
        }
        out
    }

    fn live(&self) -> Vec<ProcessId> {
        self.pids.iter().copied().filter(|p| !self.dead.contains(p)).collect()
    }

    fn owned(&self, pid: ProcessId, usable: bool) -> Vec<VirtualPage> {
        self.pages
            .iter()
            .filter(|(_, m)| m.owner == pid && (!usable || !m.revoked))
            .map(|(&p, _)| p)
            .collect()
    }

    fn settle(&mut self) {
        // requests leave when their process is free
        let busy = self.pids.iter().map(|&p| self.rack.busy_until(p)).max().unwrap_or(SimTime::ZERO);
        let until = self.rack.now().max(busy) + SimTime::from_micros(50);
        self.rack.run_until(&mut self.app, until);
    }

    fn call(&mut self, pid: ProcessId, req: Result<ReqId, crate::os::OsError>) -> Result<SysReply, String> {
        let req = req.map_err(|e| e.to_string())?;
        self.settle();
        match self.app.done.remove(&(pid, req)) {
            Some(r) => r.map_err(|e| e.to_string()),
            None => Err("no reply".into()),
        }
    }

    fn setup(&mut self, params: &PrimitivesParams) {
        for &pid in &self.pids.clone() {
            let _ = self.rack.sys_set_handler(pid, SignalKind::MemoryFault, true);
            let mut left = params.pages_per_process;
            while left > 0 {
                let n = left.min(self.rng.gen_range(1..=8));
                let allow = self.rng.gen_bool(0.75);
                let got = self.rack.alloc_now(pid, n, allow).expect("rack sized for the script");
                for page in got {
                    let content = self.tag(page);
                    let frame = self.rack.mmu().table(pid).expect("table").entries[&page].frame;
                    let _ = self.rack.access_now(pid, page.base(), AccessOp::Write { data: content.clone() });
                    self.pages.insert(
                        page,
                        PageModel { owner: pid, allow_steal: allow, revoked: false, element: frame.element, content },
                    );
                }
                left -= n;
            }
        }
        for _ in 0..self.rng.gen_range(0..=2) {
            let size = self.rng.gen_range(2..=3usize).min(self.pids.len());
            let members: Vec<ProcessId> = self.pids.choose_multiple(&mut self.rng, size).copied().collect();
            self.rack.register_group(&members).expect("known processes");
            self.steps.push(format!("group {members:?}"));
            self.groups.push(members.into_iter().collect());
        }
    }

    fn step(&mut self) {
        let live = self.live();
        let Some(&actor) = live.choose(&mut self.rng) else { return };
        let other = *self.pids.iter().filter(|&&p| p != actor).choose(&mut self.rng).expect("several processes");
        match self.rng.gen_range(0..100) {
            0..=34 => self.grant(actor, other),
            35..=59 => self.steal(actor, other),
            60..=69 => self.revoke(actor, other),
            70..=84 => self.write(actor),
            85..=94 if live.len() > 2 => {
                self.steps.push(format!("kill {actor}"));
                self.rack.inject_now(Injection::CrashProcess { pid: actor });
                self.dead.insert(actor);
                self.settle();
            }
            _ if self.failed.is_empty() => {
                let element = MemId(self.rng.gen_range(0..self.rack.config().memory_per_rack));
                self.steps.push(format!("fail {element}"));
                self.rack.inject_now(Injection::FailMemory { element, mode: Some(FailureMode::Explicit) });
                self.failed.insert(element);
                self.settle();
            }
            _ => self.write(actor),
        }
    }

    fn grant(&mut self, src: ProcessId, dst: ProcessId) {
        let owned = self.owned(src, true);
        let n = self.rng.gen_range(1..=4).min(owned.len());
        let pages: Vec<VirtualPage> = owned.choose_multiple(&mut self.rng, n).copied().collect();
        if pages.is_empty() {
            return;
        }
        self.steps.push(format!("grant {src} -> {dst} {} pages", pages.len()));
        let r = self.rack.sys_grant(src, pages.clone(), dst);
        let r = self.call(src, r);
        let expect_ok = !self.dead.contains(&dst);
        match r {
            Ok(SysReply::Granted(moved)) if expect_ok => {
                if moved.iter().copied().collect::<BTreeSet<_>>() != pages.iter().copied().collect() {
                    self.flag(Property::CapabilitySoundness, format!("grant moved {moved:?}, asked {pages:?}"));
                }
                for p in moved {
                    self.pages.get_mut(&p).expect("modelled").owner = dst;
                }
            }
            Err(_) if !expect_ok => {}
            other => self.flag(Property::CapabilitySoundness, format!("grant {src} -> {dst}: expected ok={expect_ok}, got {other:?}")),
        }
    }

    fn steal(&mut self, caller: ProcessId, src: ProcessId) {
        let grouped = self.grouped(caller, src);
        let all = self.rng.gen_bool(0.5);
        let candidates: Vec<VirtualPage> =
            self.owned(src, false).into_iter().filter(|p| self.pages[p].allow_steal).collect();
        let which = if all {
            StealSet::All
        } else {
            let n = self.rng.gen_range(1..=3).min(candidates.len());
            StealSet::Pages(candidates.choose_multiple(&mut self.rng, n).copied().collect())
        };
        let expected: BTreeSet<VirtualPage> = match &which {
            StealSet::All => candidates.iter().copied().collect(),
            StealSet::Pages(list) => list.iter().copied().collect(),
        };
        self.steps.push(format!("steal {caller} <- {src} {}", if all { "all".into() } else { format!("{}", expected.len()) }));
        let r = self.rack.sys_steal(caller, src, which);
        match self.call(caller, r) {
            Ok(SysReply::Stolen(moved)) => {
                if !grouped {
                    self.flag(Property::CapabilitySoundness, format!("steal {caller} <- {src} succeeded outside any group"));
                    return;
                }
                if moved.iter().copied().collect::<BTreeSet<_>>() != expected {
                    self.flag(Property::SingleOwner, format!("steal moved {moved:?}, model expected {expected:?}"));
                }
                for p in moved {
                    if let Some(m) = self.pages.get_mut(&p) {
                        m.owner = caller;
                        m.revoked = false;
                    }
                }
            }
            Ok(other) => self.flag(Property::CapabilitySoundness, format!("steal answered {other:?}")),
            Err(e) if grouped => self.flag(Property::CapabilitySoundness, format!("steal {caller} <- {src} within a group failed: {e}")),
            Err(_) => {}
        }
    }

    fn revoke(&mut self, caller: ProcessId, target: ProcessId) {
        let grouped = self.grouped(caller, target);
        self.steps.push(format!("revoke {caller} x {target}"));
        let r = self.rack.sys_revoke(caller, target, None);
        match self.call(caller, r) {
            Ok(SysReply::Revoked(_)) => {
                if !grouped {
                    self.flag(Property::CapabilitySoundness, format!("revoke {caller} x {target} succeeded outside any group"));
                }
                for m in self.pages.values_mut().filter(|m| m.owner == target) {
                    m.revoked = true;
                }
            }
            Ok(other) => self.flag(Property::CapabilitySoundness, format!("revoke answered {other:?}")),
            Err(e) if grouped => self.flag(Property::CapabilitySoundness, format!("revoke within a group failed: {e}")),
            Err(_) => {}
        }
    }

    fn write(&mut self, pid: ProcessId) {
        let owned: Vec<VirtualPage> =
            self.owned(pid, true).into_iter().filter(|p| !self.failed.contains(&self.pages[p].element)).collect();
        let Some(&page) = owned.choose(&mut self.rng) else { return };
        let content = self.tag(page);
        self.steps.push(format!("write {pid} {page}"));
        match self.rack.access_now(pid, page.base(), AccessOp::Write { data: content.clone() }) {
            Ok(_) => self.pages.get_mut(&page).expect("modelled").content = content,
            Err(f) => self.flag(Property::AddressStability, format!("owner {pid} could not write {page}: {f}")),
        }
    }

    /// Table-level and element-level ownership against the model, then a
    /// read of every page by every live process.
    fn check(&mut self) {
        let label = self.steps.len();
        if let Err(e) = self.rack.mmu().check_invariants() {
            self.flag(Property::SingleOwner, format!("after step {label}: {e}"));
        }
        let mut open: BTreeMap<(MemId, u32), Vec<ProcessId>> = BTreeMap::new();
        for m in self.rack.memory_elements() {
            for (pid, _, frame, perms) in m.entries() {
                if !perms.is_none() {
                    open.entry((m.id(), frame)).or_default().push(pid);
                }
            }
        }
        for ((m, f), holders) in &open {
            if holders.len() > 1 {
                self.flag(Property::SingleOwner, format!("after step {label}: frame {m}:{f} open to {holders:?}"));
            }
        }
        let mut misplaced = Vec::new();
        for (&page, model) in &self.pages {
            for &pid in &self.pids {
                let has = self.rack.mmu().table(pid).is_some_and(|t| t.entries.contains_key(&page));
                if has != (pid == model.owner) {
                    misplaced.push(format!("after step {label}: {page} in table of {pid}, model owner {}", model.owner));
                }
            }
        }
        for detail in misplaced {
            self.flag(Property::SingleOwner, detail);
        }
        let pages: Vec<(VirtualPage, PageModel)> = self.pages.iter().map(|(&p, m)| (p, m.clone())).collect();
        for (page, model) in pages {
            if self.failed.contains(&model.element) {
                continue;
            }
            for pid in self.live() {
                let r = self.rack.access_now(pid, page.base(), AccessOp::Read { len: TAG_LEN });
                let should_read = pid == model.owner && !model.revoked;
                match r {
                    Ok(bytes) if should_read => {
                        if bytes != model.content {
                            self.flag(Property::ContentPreservation, format!("after step {label}: {page} read by {pid} lost its content"));
                        }
                    }
                    Err(_) if !should_read => {}
                    Ok(_) => self.flag(Property::SingleOwner, format!("after step {label}: {pid} read {page} owned by {}", model.owner)),
                    Err(f) => self.flag(Property::AddressStability, format!("after step {label}: owner {pid} cannot read {page}: {f}")),
                }
            }
        }
    }
}

/// Replays the trace per frame: a set entry for a new process while the
/// frame is still open to another one means the clear came too late.
pub fn revoke_before_reassign(trace: &SimTrace) -> Vec<String> {
    let mut holder: BTreeMap<FrameId, (ProcessId, VirtualPage)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::SetEntry { pid, page, frame, .. } => {
                if let Some(&(old, _)) = holder.get(frame) {
                    if old != *pid {
                        out.push(format!("{}: {frame} set for {pid} while open to {old}", r.t));
                    }
                }
                holder.insert(*frame, (*pid, *page));
            }
            TraceEvent::ClearEntry { pid, page, frame: Some(frame) } => {
                if holder.get(frame) == Some(&(*pid, *page)) {
                    holder.remove(frame);
                }
            }
            _ => {}
        }
    }
    out
}

/// Runs one seeded script. `bug` plants a defect for harness self-tests.
pub fn run_script(seed: u64, params: &PrimitivesParams, bug: Option<InjectedBug>) -> PrimitivesOutcome {
    run_script_traced(seed, params, bug).0
}

pub fn run_script_traced(seed: u64, params: &PrimitivesParams, bug: Option<InjectedBug>) -> (PrimitivesOutcome, SimTrace) {
    let n = params.processes.max(2);
    let frames = (params.pages_per_process * n as usize) as u32;
    let mut cfg = RackConfig::new(1, u16::from(n), 2, LatencyModel::profile(Profile::Current));
    cfg.frames_per_element = frames;
    cfg.monitor = None;
    cfg.seed = seed;
    let mut rack: Rack<()> = Rack::new(cfg.clone()).expect("valid config");
    rack.mmu_mut().inject_bug(bug);
    let pids = (0..n)
        .map(|i| rack.spawn(cfg.compute(0, u16::from(i)), Origin::Initial { role: u64::from(i) }).expect("spawn"))
        .collect();
    let mut h = Harness {
        rack,
        app: Replies::default(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        pids,
        pages: BTreeMap::new(),
        groups: Vec::new(),
        dead: BTreeSet::new(),
        failed: BTreeSet::new(),
        version: 0,
        steps: Vec::new(),
        violations: Vec::new(),
    };
    h.settle();
    h.setup(params);
    h.check();
    for _ in 0..params.ops {
        h.step();
        h.check();
        if !h.violations.is_empty() {
            break;
        }
    }
    let mut violations = h.violations;
    let trace = h.rack.take_trace();
    violations.extend(
        revoke_before_reassign(&trace)
            .into_iter()
            .map(|detail| Violation { property: Property::RevokeBeforeReassign, detail }),
    );
    (PrimitivesOutcome { seed, steps: h.steps, violations }, trace)
}

//! The simulated deployment: one or more racks, each with compute elements,
//! memory elements, a Rack MMU and a rack monitor, joined by ToR links.
//!
//! Applications implement [`App`] and are driven by [`AppEvent`]s. They
//! call the syscall methods on [`Rack`] from inside their handlers.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{ComputeId, FrameId, MemId, ProcessId, RackId, VirtualAddress, VirtualPage, PAGE_SIZE};
use crate::engine::{ActorId, Delivery, Engine, Event};
use crate::latency::{LatencyModel, LinkClass};
use crate::memory::{AccessOp, AccessReply, ElementUpdate, FailureMode, Fault, MemoryElement};
use crate::mmu::{Effects, GroupId, MmuError, RackMmu, StealSet};
use crate::monitor::{FastFailureHandler, HandlerStep, MonitorConfig, RackMonitor};
use crate::os::{ComputeElement, ComputeState, FailureDescriptor, OsError, ProcState, Process, Signal, SignalKind};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct RackConfig {
    pub racks: u16,
    pub computes_per_rack: u16,
    pub memory_per_rack: u16,
    pub frames_per_element: u32,
    pub latency: LatencyModel,
    /// `None` disables heartbeats and monitors.
    pub monitor: Option<MonitorConfig>,
    pub access_timeout: SimTime,
    pub memory_failure_mode: FailureMode,
    pub seed: u64,
}

impl RackConfig {
    pub fn new(racks: u16, computes_per_rack: u16, memory_per_rack: u16, latency: LatencyModel) -> Self {
        RackConfig {
            racks,
            computes_per_rack,
            memory_per_rack,
            frames_per_element: 256,
            latency,
            monitor: Some(MonitorConfig::for_rtt(latency.rack_mmu_rtt)),
            access_timeout: latency.rack_mmu_rtt * 5,
            memory_failure_mode: FailureMode::Silent,
            seed: 0,
        }
    }

    pub fn compute(&self, rack: u16, index: u16) -> ComputeId {
        ComputeId(rack * self.computes_per_rack + index)
    }

    pub fn memory(&self, rack: u16, index: u16) -> MemId {
        MemId(rack * self.memory_per_rack + index)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.racks == 0 {
            return Err("racks must be at least 1".into());
        }
        if self.computes_per_rack == 0 {
            return Err("computes_per_rack must be at least 1".into());
        }
        if self.frames_per_element == 0 && self.memory_per_rack > 0 {
            return Err("frames_per_element must be positive".into());
        }
        if let Some(m) = &self.monitor {
            if m.interval == SimTime::ZERO || m.miss_threshold == 0 {
                return Err("monitor interval and miss_threshold must be positive".into());
            }
        }
        self.latency.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ReqId(pub u64);

/// Why a process exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Origin {
    /// Started by the scenario; `role` is an application tag.
    Initial { role: u64 },
    Spawned { by: Option<ProcessId>, role: u64 },
    /// Successor of a dead process, holding its stolen pages.
    Reincarnated { of: ProcessId, pages: Vec<VirtualPage> },
}

/// Asynchronous requests to the Rack MMU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MmuOp {
    Alloc { n: usize, allow_steal: bool },
    Grant { pages: Vec<VirtualPage>, dst: ProcessId },
    Steal { src: ProcessId, which: StealSet },
    Revoke { target: ProcessId, pages: Option<Vec<VirtualPage>> },
    Reincarnate { dead: ProcessId, compute: ComputeId },
    Spawn { compute: ComputeId, role: u64 },
}

impl MmuOp {
    pub fn name(&self) -> &'static str {
        match self {
            MmuOp::Alloc { .. } => "allocate",
            MmuOp::Grant { .. } => "grant",
            MmuOp::Steal { .. } => "steal",
            MmuOp::Revoke { .. } => "revoke",
            MmuOp::Reincarnate { .. } => "reincarnate",
            MmuOp::Spawn { .. } => "spawn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SysReply {
    Allocated(Vec<VirtualPage>),
    Granted(Vec<VirtualPage>),
    Stolen(Vec<VirtualPage>),
    Revoked(Vec<VirtualPage>),
    Reincarnated { pid: ProcessId, pages: Vec<VirtualPage> },
    Spawned { pid: ProcessId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Requester {
    Process(ProcessId),
    Monitor(RackId),
}

/// Scheduled failure injections.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Injection {
    CrashCompute { compute: ComputeId },
    StallCompute { compute: ComputeId, duration: SimTime },
    FailMemory { element: MemId, mode: Option<FailureMode> },
    FailMonitor { rack: RackId },
    CrashProcess { pid: ProcessId },
}

/// What an application sees.
#[derive(Debug)]
pub enum AppEvent<N> {
    Started { origin: Origin },
    Timer { token: u64 },
    Net { from: ProcessId, msg: N },
    SyscallDone { req: ReqId, result: Result<SysReply, MmuError> },
    AccessDone { token: u64, result: Result<Vec<u8>, Fault> },
    Signal(Signal),
    /// The compute element came back from a stall.
    Resumed,
}

pub trait App<N> {
    fn on_event(&mut self, rack: &mut Rack<N>, pid: ProcessId, event: AppEvent<N>);
}

impl<N, F> App<N> for F
where
    F: FnMut(&mut Rack<N>, ProcessId, AppEvent<N>),
{
    fn on_event(&mut self, rack: &mut Rack<N>, pid: ProcessId, event: AppEvent<N>) {
        self(rack, pid, event)
    }
}

#[derive(Debug)]
enum Msg<N> {
    Start { pid: ProcessId, origin: Origin },
    Timer { token: u64 },
    Net { from: ProcessId, to: ProcessId, msg: N, bytes: u64 },
    MmuReply { req: ReqId, result: Result<SysReply, MmuError>, fill: Vec<(VirtualPage, FrameId)> },
    /// `via` is the sending compute for notices that cross the ToR.
    Signal { signal: Signal, fill: Vec<(VirtualPage, FrameId)>, via: Option<ComputeId> },
    AccessReply { token: u64, result: AccessReply },
    AccessTimeout { token: u64, addr: VirtualAddress },
    Resumed,
    Invalidate { pid: ProcessId, pages: Vec<VirtualPage> },
    HeartbeatTick,
    Resume,
    /// `fence` is applied once the request's page-table updates have landed.
    MmuRequest { from: Requester, req: ReqId, op: MmuOp, fence: Option<ComputeId> },
    Fence { compute: ComputeId },
    Update(ElementUpdate),
    Access { pid: ProcessId, token: u64, addr: VirtualAddress, op: AccessOp },
    Heartbeat { compute: ComputeId },
    MonitorCheck,
    Inject(Injection),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RackStats {
    pub tor_messages: u64,
    pub tor_bytes: u64,
    pub tor_dropped: u64,
    pub accesses: u64,
    pub mmu_requests: u64,
}

pub struct Rack<N> {
    config: RackConfig,
    engine: Engine<Msg<N>>,
    mmu: RackMmu,
    memory: BTreeMap<MemId, MemoryElement>,
    computes: BTreeMap<ComputeId, ComputeElement>,
    monitors: BTreeMap<RackId, RackMonitor>,
    procs: BTreeMap<ProcessId, Process>,
    fenced: BTreeSet<ComputeId>,
    pending: BTreeSet<(ProcessId, u64)>,
    deferred: BTreeMap<ComputeId, Vec<(ActorId, Msg<N>)>>,
    next_req: u64,
    next_token: u64,
    stats: RackStats,
}

impl<N> Rack<N> {
    pub fn new(config: RackConfig) -> Result<Self, String> {
        config.validate()?;
        let mut engine = Engine::new(config.latency, config.seed);
        let mut mmu = RackMmu::new();
        let mut memory = BTreeMap::new();
        let mut computes = BTreeMap::new();
        let mut monitors = BTreeMap::new();
        engine.add_actor(ActorId::Tor);
        for r in 0..config.racks {
            let rack = RackId(r);
            engine.add_actor(ActorId::Mmu(rack));
            for i in 0..config.memory_per_rack {
                let id = config.memory(r, i);
                mmu.add_memory_element(id, rack, config.frames_per_element);
                memory.insert(id, MemoryElement::new(id, rack, config.frames_per_element));
                engine.add_actor(ActorId::Memory(id));
            }
            for i in 0..config.computes_per_rack {
                let id = config.compute(r, i);
                mmu.add_compute_element(id, rack);
                computes.insert(id, ComputeElement::new(id, rack));
                engine.add_actor(ActorId::Compute(id));
            }
            if let Some(mcfg) = config.monitor {
                let mut mon = RackMonitor::new(rack, mcfg);
                for i in 0..config.computes_per_rack {
                    mon.watch(config.compute(r, i), SimTime::ZERO);
                }
                monitors.insert(rack, mon);
                engine.add_actor(ActorId::Monitor(rack));
            }
        }
        let mut rack = Rack {
            config,
            engine,
            mmu,
            memory,
            computes,
            monitors,
            procs: BTreeMap::new(),
            fenced: BTreeSet::new(),
            pending: BTreeSet::new(),
            deferred: BTreeMap::new(),
            next_req: 0,
            next_token: 0,
            stats: RackStats::default(),
        };
        if rack.config.monitor.is_some() {
            let ids: Vec<_> = rack.computes.keys().copied().collect();
            for c in ids {
                rack.post(ActorId::Compute(c), Msg::HeartbeatTick, Delivery::Immediate);
            }
            let racks: Vec<_> = rack.monitors.keys().copied().collect();
            for r in racks {
                rack.post(ActorId::Monitor(r), Msg::MonitorCheck, Delivery::Immediate);
            }
        }
        Ok(rack)
    }

    // ----- accessors -------------------------------------------------------

    pub fn config(&self) -> &RackConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn latency(&self) -> &LatencyModel {
        self.engine.latency()
    }

    pub fn rtt(&self, link: LinkClass) -> SimTime {
        self.engine.rtt(link)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.engine.rng()
    }

    pub fn trace(&self) -> &SimTrace {
        self.engine.trace()
    }

    pub fn take_trace(&mut self) -> SimTrace {
        self.engine.take_trace()
    }

    pub fn stats(&self) -> RackStats {
        self.stats
    }

    pub fn mmu(&self) -> &RackMmu {
        &self.mmu
    }

    #[doc(hidden)]
    pub fn mmu_mut(&mut self) -> &mut RackMmu {
        &mut self.mmu
    }

    pub fn memory(&self, id: MemId) -> Option<&MemoryElement> {
        self.memory.get(&id)
    }

    pub fn memory_elements(&self) -> impl Iterator<Item = &MemoryElement> {
        self.memory.values()
    }

    pub fn compute(&self, id: ComputeId) -> Option<&ComputeElement> {
        self.computes.get(&id)
    }

    pub fn monitor(&self, rack: RackId) -> Option<&RackMonitor> {
        self.monitors.get(&rack)
    }

    pub fn process(&self, pid: ProcessId) -> Option<&Process> {
        self.procs.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &Process> {
        self.procs.values()
    }

    pub fn is_running(&self, pid: ProcessId) -> bool {
        self.procs.get(&pid).is_some_and(|p| p.is_running())
    }

    pub fn compute_of(&self, pid: ProcessId) -> Option<ComputeId> {
        self.procs.get(&pid).map(|p| p.compute)
    }

    pub fn rack_of(&self, compute: ComputeId) -> RackId {
        self.computes[&compute].rack
    }

    pub fn is_fenced(&self, compute: ComputeId) -> bool {
        self.fenced.contains(&compute)
    }

    pub fn is_halted(&self) -> bool {
        self.engine.is_halted()
    }

    pub fn halt(&mut self) {
        self.engine.halt();
    }

    /// Time the process's synchronous work finishes (at least now).
    pub fn busy_until(&self, pid: ProcessId) -> SimTime {
        self.procs.get(&pid).map_or(self.now(), |p| p.busy_until.max(self.now()))
    }

    /// Charges `d` of local compute time to the process.
    pub fn charge(&mut self, pid: ProcessId, d: SimTime) {
        let t = self.busy_until(pid) + d;
        if let Some(p) = self.procs.get_mut(&pid) {
            p.busy_until = t;
        }
    }

    pub fn record(&mut self, actor: ActorId, event: TraceEvent) {
        self.engine.record(actor, event);
    }

    pub fn app_event(&mut self, pid: ProcessId, app: &'static str, event: &'static str, fields: serde_json::Value) {
        self.engine.record(ActorId::Process(pid), TraceEvent::App { app, event, fields });
    }

    // ----- plumbing --------------------------------------------------------

    fn post(&mut self, target: ActorId, msg: Msg<N>, delivery: Delivery) {
        self.engine.schedule(target, msg, delivery).expect("rack actors are registered");
    }

    fn post_at(&mut self, target: ActorId, msg: Msg<N>, at: SimTime) {
        self.engine.schedule_at(target, msg, at.max(self.now())).expect("rack actors are registered");
    }

    fn send_fifo(
        &mut self,
        depart: SimTime,
        not_before: SimTime,
        from: ActorId,
        to: ActorId,
        msg: Msg<N>,
        link: LinkClass,
    ) -> SimTime {
        self.engine
            .schedule_fifo_from(depart, not_before, from, to, msg, link)
            .expect("rack actors are registered")
    }

    fn proc_link(&self, a: ComputeId, b: ComputeId) -> LinkClass {
        if self.rack_of(a) == self.rack_of(b) {
            LinkClass::IntraRackTor
        } else {
            LinkClass::CrossRackTor
        }
    }

    fn control_link(&self, compute: ComputeId, rack: RackId) -> LinkClass {
        if self.rack_of(compute) == rack {
            LinkClass::RackMmuInterconnect
        } else {
            LinkClass::CrossRackTor
        }
    }

    fn running(&self, pid: ProcessId) -> Result<&Process, OsError> {
        self.procs.get(&pid).filter(|p| p.is_running()).ok_or(OsError::NotRunning(pid))
    }

    fn next_req(&mut self) -> ReqId {
        self.next_req += 1;
        ReqId(self.next_req)
    }

    // ----- process lifecycle -----------------------------------------------

    fn add_process(&mut self, pid: ProcessId, compute: ComputeId) {
        self.procs.insert(pid, Process::new(pid, compute));
        self.computes.get_mut(&compute).expect("known compute").processes.insert(pid);
        self.engine.add_actor(ActorId::Process(pid));
    }

    /// Starts a process directly (scenario setup). It receives
    /// [`AppEvent::Started`] at the current time.
    pub fn spawn(&mut self, compute: ComputeId, origin: Origin) -> Result<ProcessId, OsError> {
        let ce = self.computes.get(&compute).ok_or(OsError::UnknownCompute(compute))?;
        if ce.state == ComputeState::Crashed {
            return Err(OsError::UnknownCompute(compute));
        }
        let pid = self.mmu.provision(compute)?;
        self.add_process(pid, compute);
        self.post(ActorId::Process(pid), Msg::Start { pid, origin }, Delivery::Immediate);
        Ok(pid)
    }

    /// Ends a process. Its pages stay mapped; only its execution stops.
    pub fn exit(&mut self, pid: ProcessId, cause: &str) {
        let Some(p) = self.procs.get_mut(&pid) else { return };
        if !p.is_running() {
            return;
        }
        p.state = ProcState::Exited { cause: cause.to_string() };
        let compute = p.compute;
        self.mmu.mark_dead(pid);
        if let Some(ce) = self.computes.get_mut(&compute) {
            ce.forget_process(pid);
        }
        self.pending.retain(|&(p, _)| p != pid);
        self.engine.record(ActorId::Process(pid), TraceEvent::ProcessExit { pid, cause: cause.to_string() });
    }

    pub fn inject_at(&mut self, at: SimTime, injection: Injection) {
        self.post_at(ActorId::Tor, Msg::Inject(injection), at);
    }

    pub fn inject_now(&mut self, injection: Injection) {
        self.apply_injection(injection);
    }

    /// Adds a ToR fence rule: messages from or to the element are dropped.
    pub fn fence(&mut self, compute: ComputeId) {
        if self.fenced.insert(compute) {
            self.engine.record(ActorId::Tor, TraceEvent::Fence { compute });
        }
    }

    // ----- syscalls --------------------------------------------------------

    pub fn sys_set_handler(&mut self, pid: ProcessId, kind: SignalKind, on: bool) -> Result<(), OsError> {
        self.running(pid)?;
        let p = self.procs.get_mut(&pid).expect("running");
        if on {
            p.handlers.insert(kind);
        } else {
            p.handlers.remove(&kind);
        }
        Ok(())
    }

    fn submit(&mut self, pid: ProcessId, rack: RackId, op: MmuOp) -> Result<ReqId, OsError> {
        let compute = self.running(pid)?.compute;
        let req = self.next_req();
        let depart = self.busy_until(pid);
        let link = self.control_link(compute, rack);
        self.stats.mmu_requests += 1;
        self.send_fifo(
            depart,
            SimTime::ZERO,
            ActorId::Process(pid),
            ActorId::Mmu(rack),
            Msg::MmuRequest { from: Requester::Process(pid), req, op, fence: None },
            link,
        );
        Ok(req)
    }

    fn own_rack(&self, pid: ProcessId) -> Result<RackId, OsError> {
        Ok(self.rack_of(self.running(pid)?.compute))
    }

    pub fn sys_alloc(&mut self, pid: ProcessId, n: usize, allow_steal: bool) -> Result<ReqId, OsError> {
        let r = self.own_rack(pid)?;
        self.submit(pid, r, MmuOp::Alloc { n, allow_steal })
    }

    pub fn sys_grant(&mut self, pid: ProcessId, pages: Vec<VirtualPage>, dst: ProcessId) -> Result<ReqId, OsError> {
        let r = self.own_rack(pid)?;
        self.submit(pid, r, MmuOp::Grant { pages, dst })
    }

    pub fn sys_steal(&mut self, pid: ProcessId, src: ProcessId, which: StealSet) -> Result<ReqId, OsError> {
        let r = self.own_rack(pid)?;
        self.submit(pid, r, MmuOp::Steal { src, which })
    }

    /// Revokes another process's access; needs the steal capability.
    pub fn sys_revoke(
        &mut self,
        pid: ProcessId,
        target: ProcessId,
        pages: Option<Vec<VirtualPage>>,
    ) -> Result<ReqId, OsError> {
        let c = self.compute_of(target).ok_or(MmuError::UnknownProcess(target))?;
        let r = self.rack_of(c);
        self.submit(pid, r, MmuOp::Revoke { target, pages })
    }

    /// Asks the Rack MMU that owns `compute` to start a successor of `dead`
    /// there with `dead`'s pages.
    pub fn sys_reincarnate(&mut self, pid: ProcessId, dead: ProcessId, compute: ComputeId) -> Result<ReqId, OsError> {
        let r = self.computes.get(&compute).ok_or(OsError::UnknownCompute(compute))?.rack;
        self.submit(pid, r, MmuOp::Reincarnate { dead, compute })
    }

    pub fn sys_spawn(&mut self, pid: ProcessId, compute: ComputeId, role: u64) -> Result<ReqId, OsError> {
        let r = self.computes.get(&compute).ok_or(OsError::UnknownCompute(compute))?.rack;
        self.submit(pid, r, MmuOp::Spawn { compute, role })
    }

    /// Allocates synchronously: the process is charged one interconnect
    /// round trip and the pages are usable on return.
    pub fn alloc_now(&mut self, pid: ProcessId, n: usize, allow_steal: bool) -> Result<Vec<VirtualPage>, OsError> {
        let compute = self.running(pid)?.compute;
        let rack = self.rack_of(compute);
        let fx = match self.mmu.allocate(pid, n, allow_steal) {
            Ok(fx) => fx,
            Err(e) => {
                self.record_syscall(pid, "allocate", Err(&e));
                return Err(e.into());
            }
        };
        self.engine.record(
            ActorId::Mmu(rack),
            TraceEvent::MmuAllocate { pid, pages: fx.pages(), frames: fx.frames() },
        );
        for (m, u) in &fx.updates {
            self.apply_update(*m, u);
        }
        let ce = self.computes.get_mut(&compute).expect("known compute");
        for &(page, frame) in &fx.moved {
            ce.cache_insert(pid, page, frame);
        }
        let rtt = self.rtt(LinkClass::RackMmuInterconnect);
        self.charge(pid, rtt);
        self.record_syscall(pid, "allocate", Ok(()));
        Ok(fx.pages())
    }

    pub fn sys_register_group(&mut self, pid: ProcessId, members: &[ProcessId]) -> Result<GroupId, OsError> {
        let compute = self.running(pid)?.compute;
        let g = self.mmu.register_group(members)?;
        let rack = self.rack_of(compute);
        self.engine.record(
            ActorId::Mmu(rack),
            TraceEvent::MmuGroup { group: g.0, members: members.to_vec() },
        );
        let rtt = self.rtt(LinkClass::RackMmuInterconnect);
        self.charge(pid, rtt);
        Ok(g)
    }

    /// Control-plane group registration (scenario setup).
    pub fn register_group(&mut self, members: &[ProcessId]) -> Result<GroupId, MmuError> {
        let g = self.mmu.register_group(members)?;
        self.engine.record(ActorId::Mmu(RackId(0)), TraceEvent::MmuGroup { group: g.0, members: members.to_vec() });
        Ok(g)
    }

    pub fn sys_register_failure_group(&mut self, pid: ProcessId, members: &[ProcessId]) -> Result<(), OsError> {
        let compute = self.running(pid)?.compute;
        if let Some(&m) = members.iter().find(|m| !self.procs.contains_key(m)) {
            return Err(OsError::UnknownMember(m));
        }
        self.computes
            .get_mut(&compute)
            .expect("known compute")
            .register_failure_group(pid, members.iter().copied().collect());
        self.record_syscall(pid, "register_failure_group", Ok(()));
        Ok(())
    }

    /// Sends one failure notice per registered contact. Returns how many
    /// were sent.
    pub fn sys_notify_group(&mut self, pid: ProcessId, failure: FailureDescriptor) -> Result<usize, OsError> {
        let compute = self.running(pid)?.compute;
        let ce = self.computes.get_mut(&compute).expect("known compute");
        let contacts = ce.contacts(pid).ok_or(OsError::NoGroupRegistered(pid))?;
        let seq = ce.next_notice_seq(pid);
        let depart = self.busy_until(pid);
        let mut sent = 0;
        for to in contacts {
            let Some(dst) = self.compute_of(to) else { continue };
            let link = self.proc_link(compute, dst);
            self.engine.record(ActorId::Process(pid), TraceEvent::Notice { from: pid, to, seq, failure });
            let signal = Signal::GroupFailureNotice { about: pid, seq, failure };
            self.send_fifo(
                depart,
                SimTime::ZERO,
                ActorId::Process(pid),
                ActorId::Process(to),
                Msg::Signal { signal, fill: vec![], via: Some(compute) },
                link,
            );
            sent += 1;
        }
        self.record_syscall(pid, "notify_group", Ok(()));
        Ok(sent)
    }

    pub fn register_fast_failure_handler(&mut self, pid: ProcessId, handler: FastFailureHandler) -> Result<(), OsError> {
        let compute = self.running(pid)?.compute;
        let rack = self.rack_of(compute);
        if let Some(m) = self.monitors.get_mut(&rack) {
            m.register_handler(pid, handler);
            self.engine.record(ActorId::Monitor(rack), TraceEvent::HandlerRegistered { pid });
        }
        Ok(())
    }

    pub fn send(&mut self, pid: ProcessId, to: ProcessId, msg: N, bytes: u64) -> Result<(), OsError> {
        let src = self.running(pid)?.compute;
        let Some(dst) = self.compute_of(to) else {
            return Err(OsError::Mmu(MmuError::UnknownProcess(to)));
        };
        let link = self.proc_link(src, dst);
        let depart = self.busy_until(pid);
        self.stats.tor_messages += 1;
        self.engine.record(ActorId::Process(pid), TraceEvent::NetSend { from: pid, to, link, bytes });
        self.send_fifo(
            depart,
            SimTime::ZERO,
            ActorId::Process(pid),
            ActorId::Process(to),
            Msg::Net { from: pid, to, msg, bytes },
            link,
        );
        Ok(())
    }

    pub fn set_timer(&mut self, pid: ProcessId, after: SimTime, token: u64) -> Result<(), OsError> {
        self.running(pid)?;
        let at = self.busy_until(pid) + after;
        self.post_at(ActorId::Process(pid), Msg::Timer { token }, at);
        Ok(())
    }

    fn translate(&mut self, pid: ProcessId, compute: ComputeId, addr: VirtualAddress) -> (Result<FrameId, Fault>, bool) {
        if let Some(f) = self.computes[&compute].cached(pid, addr.page()) {
            return (Ok(f), false);
        }
        match self.mmu.translate(pid, addr) {
            Ok((frame, _)) => {
                self.computes.get_mut(&compute).expect("known").cache_insert(pid, addr.page(), frame);
                (Ok(frame), true)
            }
            Err(_) => (Err(Fault::Unmapped), true),
        }
    }

    /// Issues an asynchronous access; the outcome arrives as
    /// [`AppEvent::AccessDone`] with the returned token.
    pub fn access(&mut self, pid: ProcessId, addr: VirtualAddress, op: AccessOp) -> Result<u64, OsError> {
        let compute = self.running(pid)?.compute;
        self.next_token += 1;
        let token = self.next_token;
        let rtt = self.rtt(LinkClass::RackMmuInterconnect);
        let mut depart = self.busy_until(pid);
        let (frame, missed) = self.translate(pid, compute, addr);
        if missed {
            depart += rtt;
        }
        self.pending.insert((pid, token));
        self.stats.accesses += 1;
        let frame = match frame {
            Ok(f) if addr.offset() + op.len() <= PAGE_SIZE => f,
            Ok(_) => {
                self.post_at(ActorId::Process(pid), Msg::AccessReply { token, result: Err(Fault::OutOfBounds) }, depart);
                return Ok(token);
            }
            Err(f) => {
                self.post_at(ActorId::Process(pid), Msg::AccessReply { token, result: Err(f) }, depart);
                return Ok(token);
            }
        };
        self.send_fifo(
            depart,
            SimTime::ZERO,
            ActorId::Process(pid),
            ActorId::Memory(frame.element),
            Msg::Access { pid, token, addr, op },
            LinkClass::RackMmuInterconnect,
        );
        let timeout = self.config.access_timeout;
        self.post_at(ActorId::Process(pid), Msg::AccessTimeout { token, addr }, depart + timeout);
        Ok(token)
    }

    /// Performs an access inline, charging its round trip (or the access
    /// timeout) to the process. The access must stay within one page.
    /// An unhandled fault ends the process.
    pub fn access_now(&mut self, pid: ProcessId, addr: VirtualAddress, op: AccessOp) -> Result<Vec<u8>, Fault> {
        let Ok(proc) = self.running(pid) else {
            return Err(Fault::NoEntry);
        };
        let compute = proc.compute;
        let rtt = self.rtt(LinkClass::RackMmuInterconnect);
        self.stats.accesses += 1;
        let (frame, missed) = self.translate(pid, compute, addr);
        if missed {
            self.charge(pid, rtt);
        }
        let result = match frame {
            Err(f) => Err(f),
            Ok(frame) => {
                let kind = op.kind();
                let len = op.len();
                let reply = self.memory.get_mut(&frame.element).expect("known element").access(pid, addr, &op);
                let actor = ActorId::Memory(frame.element);
                match reply {
                    None => {
                        self.engine.record(actor, TraceEvent::AccessIgnored { pid, addr });
                        self.engine.record(ActorId::Process(pid), TraceEvent::AccessTimeout { pid, addr });
                        let timeout = self.config.access_timeout;
                        self.charge(pid, timeout);
                        Err(Fault::Timeout)
                    }
                    Some(r) => {
                        self.engine.record(
                            actor,
                            TraceEvent::Access { pid, addr, op: kind, len, fault: r.as_ref().err().copied() },
                        );
                        self.charge(pid, rtt);
                        r
                    }
                }
            }
        };
        if let Err(fault) = result {
            self.memory_fault(pid, addr, fault);
        }
        result
    }

    /// Returns true if the process survives the fault.
    fn memory_fault(&mut self, pid: ProcessId, addr: VirtualAddress, fault: Fault) -> bool {
        let _ = addr;
        let handled = self.procs.get(&pid).is_some_and(|p| p.handles(SignalKind::MemoryFault));
        self.engine.record(
            ActorId::Process(pid),
            TraceEvent::Signal { pid, signal: SignalKind::MemoryFault, handled },
        );
        if !handled {
            self.exit(pid, &format!("unhandled memory fault ({fault})"));
        }
        handled
    }

    fn record_syscall(&mut self, pid: ProcessId, call: &'static str, outcome: Result<(), &MmuError>) {
        let outcome = match outcome {
            Ok(()) => "ok".to_string(),
            Err(e) => e.code().to_string(),
        };
        self.engine.record(ActorId::Process(pid), TraceEvent::Syscall { pid, call, outcome });
    }

    // ----- event loop ------------------------------------------------------

    /// Runs until the clock would pass `stop` (or the rack halts).
    pub fn run_until<A: App<N> + ?Sized>(&mut self, app: &mut A, stop: SimTime) {
        while let Some(ev) = self.engine.pop_until(stop) {
            self.dispatch(app, ev);
        }
        if !self.engine.is_halted() {
            self.engine.advance_to(stop);
        }
    }

    /// Runs until `done` holds after some event, or `limit`.
    pub fn run_while<A, D>(&mut self, app: &mut A, limit: SimTime, mut done: D) -> bool
    where
        A: App<N> + ?Sized,
        D: FnMut(&Rack<N>) -> bool,
    {
        while let Some(ev) = self.engine.pop_until(limit) {
            self.dispatch(app, ev);
            if done(self) {
                return true;
            }
        }
        false
    }

    fn dispatch<A: App<N> + ?Sized>(&mut self, app: &mut A, ev: Event<Msg<N>>) {
        let target = ev.target;
        match (target, ev.payload) {
            (ActorId::Process(pid), msg) => self.to_process(app, pid, msg),
            (ActorId::Compute(c), msg) => self.to_compute(app, c, msg),
            (ActorId::Mmu(r), Msg::MmuRequest { from, req, op, fence }) => self.handle_mmu(r, from, req, op, fence),
            (ActorId::Tor, Msg::Fence { compute }) => self.fence(compute),
            (ActorId::Memory(m), Msg::Update(u)) => self.apply_update(m, &u),
            (ActorId::Memory(m), Msg::Access { pid, token, addr, op }) => self.element_access(m, pid, token, addr, op),
            (ActorId::Monitor(r), Msg::Heartbeat { compute }) => {
                let now = self.now();
                if let Some(mon) = self.monitors.get_mut(&r) {
                    mon.on_heartbeat(compute, now);
                }
            }
            (ActorId::Monitor(r), Msg::MonitorCheck) => self.monitor_check(r),
            (ActorId::Tor, Msg::Inject(inj)) => self.apply_injection(inj),
            (t, _) => unreachable!("no handler for message at {t}"),
        }
    }

    fn to_process<A: App<N> + ?Sized>(&mut self, app: &mut A, pid: ProcessId, msg: Msg<N>) {
        let Some(p) = self.procs.get(&pid) else { return };
        let compute = p.compute;
        if !p.is_running() {
            if let Msg::Net { from, to, .. } = msg {
                self.stats.tor_dropped += 1;
                self.engine.record(ActorId::Tor, TraceEvent::NetDrop { from, to, reason: "dead" });
            }
            return;
        }
        match self.computes[&compute].state {
            ComputeState::Crashed => return,
            ComputeState::Stalled { .. } => {
                if let Msg::Net { from, to, .. } = msg {
                    self.stats.tor_dropped += 1;
                    self.engine.record(ActorId::Tor, TraceEvent::NetDrop { from, to, reason: "stalled" });
                } else {
                    self.deferred.entry(compute).or_default().push((ActorId::Process(pid), msg));
                }
                return;
            }
            ComputeState::Alive => {}
        }
        let busy = p.busy_until;
        if busy > self.now() {
            self.post_at(ActorId::Process(pid), msg, busy);
            return;
        }
        let event = match msg {
            Msg::Start { pid, origin } => {
                self.engine.record(
                    ActorId::Process(pid),
                    TraceEvent::ProcessStart { pid, compute, origin: origin.clone() },
                );
                AppEvent::Started { origin }
            }
            Msg::Timer { token } => AppEvent::Timer { token },
            Msg::Net { from, to, msg, bytes } => {
                let from_compute = self.compute_of(from);
                if from_compute.is_some_and(|c| self.fenced.contains(&c)) || self.fenced.contains(&compute) {
                    self.stats.tor_dropped += 1;
                    self.engine.record(ActorId::Tor, TraceEvent::NetDrop { from, to, reason: "fenced" });
                    return;
                }
                self.stats.tor_bytes += bytes;
                self.engine.record(ActorId::Process(to), TraceEvent::NetDeliver { from, to, bytes });
                AppEvent::Net { from, msg }
            }
            Msg::MmuReply { req, result, fill, .. } => {
                let ce = self.computes.get_mut(&compute).expect("known");
                for (page, frame) in fill {
                    ce.cache_insert(pid, page, frame);
                }
                let call = match &result {
                    Ok(SysReply::Allocated(_)) => "allocate",
                    Ok(SysReply::Granted(_)) => "grant",
                    Ok(SysReply::Stolen(_)) => "steal",
                    Ok(SysReply::Revoked(_)) => "revoke",
                    Ok(SysReply::Reincarnated { .. }) => "reincarnate",
                    Ok(SysReply::Spawned { .. }) => "spawn",
                    Err(_) => "mmu",
                };
                self.record_syscall(pid, call, result.as_ref().map(|_| ()));
                AppEvent::SyscallDone { req, result }
            }
            Msg::Signal { signal, fill, via } => {
                if via.is_some_and(|c| self.fenced.contains(&c)) || (via.is_some() && self.fenced.contains(&compute)) {
                    self.stats.tor_dropped += 1;
                    if let Signal::GroupFailureNotice { about, .. } = signal {
                        self.engine.record(ActorId::Tor, TraceEvent::NetDrop { from: about, to: pid, reason: "fenced" });
                    }
                    return;
                }
                let ce = self.computes.get_mut(&compute).expect("known");
                for (page, frame) in fill {
                    ce.cache_insert(pid, page, frame);
                }
                let kind = signal.kind();
                if let Signal::MemoryFault { addr, fault } = signal {
                    if !self.memory_fault(pid, addr, fault) {
                        return;
                    }
                } else {
                    let handled = self.procs[&pid].handles(kind);
                    self.engine.record(ActorId::Process(pid), TraceEvent::Signal { pid, signal: kind, handled });
                    if !handled {
                        return;
                    }
                }
                AppEvent::Signal(signal)
            }
            Msg::AccessReply { token, result, .. } => {
                if !self.pending.remove(&(pid, token)) {
                    return;
                }
                if result.is_err() {
                    // the fault is reported through the pending access
                    let handled = self.procs[&pid].handles(SignalKind::MemoryFault);
                    if !handled {
                        self.exit(pid, "unhandled memory fault");
                        return;
                    }
                }
                AppEvent::AccessDone { token, result }
            }
            Msg::AccessTimeout { token, addr, .. } => {
                if !self.pending.remove(&(pid, token)) {
                    return;
                }
                self.engine.record(ActorId::Process(pid), TraceEvent::AccessTimeout { pid, addr });
                if !self.memory_fault(pid, addr, Fault::Timeout) {
                    return;
                }
                AppEvent::AccessDone { token, result: Err(Fault::Timeout) }
            }
            Msg::Resumed => AppEvent::Resumed,
            _ => unreachable!("not a process message"),
        };
        app.on_event(self, pid, event);
    }

    fn to_compute<A: App<N> + ?Sized>(&mut self, app: &mut A, c: ComputeId, msg: Msg<N>) {
        let _ = app;
        match msg {
            Msg::Invalidate { pid, pages } => {
                let ce = self.computes.get_mut(&c).expect("known");
                if ce.state != ComputeState::Crashed {
                    ce.invalidate(pid, &pages);
                    self.engine.record(ActorId::Compute(c), TraceEvent::Invalidate { pid, pages });
                }
            }
            Msg::HeartbeatTick => {
                let Some(interval) = self.config.monitor.map(|m| m.interval) else { return };
                let ce = &self.computes[&c];
                let rack = ce.rack;
                match ce.state {
                    ComputeState::Crashed => return,
                    ComputeState::Alive => {
                        let now = self.now();
                        self.send_fifo(
                            now,
                            SimTime::ZERO,
                            ActorId::Compute(c),
                            ActorId::Monitor(rack),
                            Msg::Heartbeat { compute: c },
                            LinkClass::RackMmuInterconnect,
                        );
                    }
                    ComputeState::Stalled { .. } => {}
                }
                self.post(ActorId::Compute(c), Msg::HeartbeatTick, Delivery::After(interval));
            }
            Msg::Resume => {
                let now = self.now();
                let ce = self.computes.get_mut(&c).expect("known");
                let ComputeState::Stalled { until } = ce.state else { return };
                if until > now {
                    return;
                }
                ce.state = ComputeState::Alive;
                self.engine.record(ActorId::Compute(c), TraceEvent::ComputeResume { compute: c });
                for (target, msg) in self.deferred.remove(&c).unwrap_or_default() {
                    self.post_at(target, msg, now);
                }
                let pids: Vec<_> = self.computes[&c].processes.iter().copied().collect();
                for pid in pids {
                    if self.is_running(pid) {
                        self.post_at(ActorId::Process(pid), Msg::Resumed, now);
                    }
                }
            }
            _ => unreachable!("not a compute message"),
        }
    }

    fn apply_injection(&mut self, inj: Injection) {
        let now = self.now();
        match inj {
            Injection::CrashCompute { compute } => {
                let Some(ce) = self.computes.get_mut(&compute) else { return };
                if ce.state == ComputeState::Crashed {
                    return;
                }
                ce.crash();
                self.deferred.remove(&compute);
                self.engine.record(ActorId::Compute(compute), TraceEvent::ComputeCrash { compute });
                let pids: Vec<_> = self.computes[&compute].processes.iter().copied().collect();
                for pid in pids {
                    self.exit(pid, "compute crash");
                }
            }
            Injection::StallCompute { compute, duration } => {
                let Some(ce) = self.computes.get_mut(&compute) else { return };
                if ce.state != ComputeState::Alive {
                    return;
                }
                let until = now + duration;
                ce.state = ComputeState::Stalled { until };
                self.engine.record(ActorId::Compute(compute), TraceEvent::ComputeStall { compute, until });
                self.post_at(ActorId::Compute(compute), Msg::Resume, until);
            }
            Injection::FailMemory { element, mode } => {
                let mode = mode.unwrap_or(self.config.memory_failure_mode);
                let Some(m) = self.memory.get_mut(&element) else { return };
                if m.fail(now, mode) {
                    self.mmu.mark_element_failed(element);
                    self.engine.record(ActorId::Memory(element), TraceEvent::ElementFailed { element, mode });
                }
            }
            Injection::FailMonitor { rack } => {
                if let Some(m) = self.monitors.get_mut(&rack) {
                    if m.fail() {
                        self.engine.record(ActorId::Monitor(rack), TraceEvent::MonitorFailed);
                    }
                }
            }
            Injection::CrashProcess { pid } => self.exit(pid, "crashed"),
        }
    }

    // ----- memory elements -------------------------------------------------

    fn apply_update(&mut self, m: MemId, u: &ElementUpdate) {
        let frame = self.memory.get_mut(&m).expect("known element").apply(u);
        let ev = match *u {
            ElementUpdate::Set { pid, page, perms, .. } => {
                TraceEvent::SetEntry { pid, page, frame: frame.expect("set yields frame"), perms }
            }
            ElementUpdate::Clear { pid, page } => TraceEvent::ClearEntry { pid, page, frame },
        };
        self.engine.record(ActorId::Memory(m), ev);
    }

    fn element_access(&mut self, m: MemId, pid: ProcessId, token: u64, addr: VirtualAddress, op: AccessOp) {
        let kind = op.kind();
        let len = op.len();
        let reply = self.memory.get_mut(&m).expect("known element").access(pid, addr, &op);
        let Some(result) = reply else {
            self.engine.record(ActorId::Memory(m), TraceEvent::AccessIgnored { pid, addr });
            return;
        };
        self.engine.record(
            ActorId::Memory(m),
            TraceEvent::Access { pid, addr, op: kind, len, fault: result.as_ref().err().copied() },
        );
        let now = self.now();
        self.send_fifo(
            now,
            SimTime::ZERO,
            ActorId::Memory(m),
            ActorId::Process(pid),
            Msg::AccessReply { token, result },
            LinkClass::RackMmuInterconnect,
        );
    }

    // ----- Rack MMU --------------------------------------------------------

    fn handle_mmu(&mut self, r: RackId, from: Requester, req: ReqId, op: MmuOp, fence: Option<ComputeId>) {
        let actor = ActorId::Mmu(r);
        let opname = op.name();
        let caller = match from {
            Requester::Process(p) => Some(p),
            Requester::Monitor(_) => None,
        };
        let reply_to = |rack: &Self| -> Option<(ProcessId, LinkClass)> {
            let p = caller?;
            let c = rack.compute_of(p)?;
            Some((p, rack.control_link(c, r)))
        };
        let result: Result<(SysReply, Effects, Option<(ProcessId, Signal)>, Option<(ProcessId, Origin)>), MmuError> =
            match op {
                MmuOp::Alloc { n, allow_steal } => {
                    let pid = caller.expect("processes allocate");
                    self.mmu.allocate(pid, n, allow_steal).map(|fx| {
                        self.engine.record(actor, TraceEvent::MmuAllocate { pid, pages: fx.pages(), frames: fx.frames() });
                        (SysReply::Allocated(fx.pages()), fx, None, None)
                    })
                }
                MmuOp::Grant { pages, dst } => {
                    let src = caller.expect("processes grant");
                    self.mmu.grant(src, &pages, dst).map(|fx| {
                        self.engine.record(
                            actor,
                            TraceEvent::MmuGrant { src, dst, pages: fx.pages(), frames: fx.frames() },
                        );
                        let sig = (!fx.moved.is_empty()).then(|| (dst, Signal::PageAdded { pages: fx.pages() }));
                        (SysReply::Granted(fx.pages()), fx, sig, None)
                    })
                }
                MmuOp::Steal { src, which } => {
                    let pid = caller.expect("processes steal");
                    self.mmu.steal(pid, src, &which).map(|fx| {
                        self.engine.record(
                            actor,
                            TraceEvent::MmuSteal { caller: pid, src, pages: fx.pages(), frames: fx.frames() },
                        );
                        let sig = (!fx.moved.is_empty()).then(|| (pid, Signal::PageAdded { pages: fx.pages() }));
                        (SysReply::Stolen(fx.pages()), fx, sig, None)
                    })
                }
                MmuOp::Revoke { target, pages } => {
                    let authorized = caller.is_none_or(|c| self.mmu.shares_group(c, target));
                    if !authorized {
                        Err(MmuError::NotInGroup { caller: caller.expect("checked"), src: target })
                    } else {
                        self.mmu.revoke(target, pages.as_deref()).map(|fx| {
                            let cleared: Vec<_> = fx.invalidate.iter().flat_map(|(_, _, p)| p.clone()).collect();
                            self.engine.record(actor, TraceEvent::MmuRevoke { pid: target, pages: cleared.clone() });
                            (SysReply::Revoked(cleared), fx, None, None)
                        })
                    }
                }
                MmuOp::Reincarnate { dead, compute } => self.mmu.reincarnate(caller, dead, compute).map(|(new, fx)| {
                    let revoked: Vec<_> = fx.invalidate.iter().flat_map(|(_, _, p)| p.clone()).collect();
                    self.engine.record(actor, TraceEvent::MmuRevoke { pid: dead, pages: revoked });
                    self.engine.record(
                        actor,
                        TraceEvent::MmuProvision { pid: new, compute, successor_of: Some(dead) },
                    );
                    self.engine.record(
                        actor,
                        TraceEvent::MmuSteal { caller: new, src: dead, pages: fx.pages(), frames: fx.frames() },
                    );
                    self.add_process(new, compute);
                    let origin = Origin::Reincarnated { of: dead, pages: fx.pages() };
                    (SysReply::Reincarnated { pid: new, pages: fx.pages() }, fx, None, Some((new, origin)))
                }),
                MmuOp::Spawn { compute, role } => {
                    let alive = self.computes.get(&compute).is_some_and(|c| c.state != ComputeState::Crashed);
                    if !alive {
                        Err(MmuError::UnknownCompute(compute))
                    } else {
                        self.mmu.provision(compute).map(|new| {
                            self.engine.record(actor, TraceEvent::MmuProvision { pid: new, compute, successor_of: None });
                            self.add_process(new, compute);
                            let origin = Origin::Spawned { by: caller, role };
                            (SysReply::Spawned { pid: new }, Effects::default(), None, Some((new, origin)))
                        })
                    }
                }
            };

        let target = reply_to(self);
        let now = self.now();
        match result {
            Err(e) => {
                if let Some(c) = fence {
                    self.fence(c);
                }
                if let Some(pid) = caller {
                    self.engine.record(actor, TraceEvent::MmuReject { pid, op: opname, error: e.to_string() });
                }
                if let Some((pid, link)) = target {
                    self.send_fifo(
                        now,
                        SimTime::ZERO,
                        actor,
                        ActorId::Process(pid),
                        Msg::MmuReply { req, result: Err(e), fill: vec![] },
                        link,
                    );
                }
            }
            Ok((reply, fx, signal, start)) => {
                let mut sets_done = now;
                let mut all_done = now;
                for (m, u) in &fx.updates {
                    let at = self.send_fifo(
                        now,
                        SimTime::ZERO,
                        actor,
                        ActorId::Memory(*m),
                        Msg::Update(u.clone()),
                        LinkClass::RackMmuInterconnect,
                    );
                    if matches!(u, ElementUpdate::Set { .. }) {
                        sets_done = sets_done.max(at);
                    }
                    all_done = all_done.max(at);
                }
                if let Some(c) = fence {
                    self.post_at(ActorId::Tor, Msg::Fence { compute: c }, all_done);
                }
                for (pid, c, pages) in &fx.invalidate {
                    if self.computes.contains_key(c) {
                        self.send_fifo(
                            now,
                            SimTime::ZERO,
                            actor,
                            ActorId::Compute(*c),
                            Msg::Invalidate { pid: *pid, pages: pages.clone() },
                            LinkClass::RackMmuInterconnect,
                        );
                    }
                }
                if let Some((pid, link)) = target {
                    // an allocation is only usable once its entries exist
                    let (not_before, fill) = match &reply {
                        SysReply::Allocated(_) => (sets_done, fx.moved.clone()),
                        _ => (SimTime::ZERO, vec![]),
                    };
                    self.send_fifo(
                        now,
                        not_before,
                        actor,
                        ActorId::Process(pid),
                        Msg::MmuReply { req, result: Ok(reply), fill },
                        link,
                    );
                }
                if let Some((pid, signal)) = signal {
                    if let Some(c) = self.compute_of(pid) {
                        let link = self.control_link(c, r);
                        self.send_fifo(
                            now,
                            sets_done,
                            actor,
                            ActorId::Process(pid),
                            Msg::Signal { signal, fill: fx.moved.clone(), via: None },
                            link,
                        );
                    }
                }
                if let Some((pid, origin)) = start {
                    let c = self.compute_of(pid).expect("just added");
                    let ce = self.computes.get_mut(&c).expect("known");
                    for &(page, frame) in &fx.moved {
                        ce.cache_insert(pid, page, frame);
                    }
                    self.send_fifo(
                        now,
                        sets_done,
                        actor,
                        ActorId::Process(pid),
                        Msg::Start { pid, origin },
                        LinkClass::RackMmuInterconnect,
                    );
                }
            }
        }
    }

    // ----- rack monitor ----------------------------------------------------

    fn monitor_check(&mut self, r: RackId) {
        let now = self.now();
        let Some(mon) = self.monitors.get_mut(&r) else { return };
        if !mon.is_alive() {
            return;
        }
        let interval = mon.config.interval;
        let failed = mon.check(now);
        for (c, last_seen) in failed {
            self.engine.record(ActorId::Monitor(r), TraceEvent::Detect { compute: c, last_seen });
            let pids: Vec<_> = self.computes[&c].processes.iter().copied().collect();
            for pid in pids {
                let Some(handler) = self.monitors.get_mut(&r).and_then(|m| m.take_handler(pid)) else { continue };
                self.run_handler(r, c, pid, handler);
            }
        }
        self.post(ActorId::Monitor(r), Msg::MonitorCheck, Delivery::After(interval));
    }

    fn run_handler(&mut self, r: RackId, failed: ComputeId, dead: ProcessId, handler: FastFailureHandler) {
        let actor = ActorId::Monitor(r);
        self.engine.record(actor, TraceEvent::HandlerRun { pid: dead, steps: handler.steps.len() });
        let mut provision = None;
        let mut steal = false;
        let mut fence = false;
        let mut notify = Vec::new();
        for step in handler.ordered_steps() {
            match step {
                HandlerStep::RequestProvision { compute } => provision = Some(*compute),
                HandlerStep::TriggerStealOnBehalf => steal = true,
                HandlerStep::FenceCompute => fence = true,
                HandlerStep::NotifyGroup { members } => notify.extend(members.iter().copied()),
            }
        }
        // with a steal, the fence goes up once the revocation has landed
        let fence_after = (fence && steal && provision.is_some()).then_some(failed);
        if fence && fence_after.is_none() {
            self.fence(failed);
        }
        let now = self.now();
        if let Some(compute) = provision {
            let op = if steal {
                MmuOp::Reincarnate { dead, compute }
            } else {
                MmuOp::Spawn { compute, role: u64::from(dead.get()) }
            };
            let target_rack = self.rack_of(compute);
            let link = if target_rack == r { LinkClass::RackMmuInterconnect } else { LinkClass::CrossRackTor };
            let req = self.next_req();
            self.send_fifo(
                now,
                SimTime::ZERO,
                actor,
                ActorId::Mmu(target_rack),
                Msg::MmuRequest { from: Requester::Monitor(r), req, op, fence: fence_after },
                link,
            );
        }
        let failure = FailureDescriptor::Compute { compute: failed };
        for (i, to) in notify.into_iter().enumerate() {
            let Some(c) = self.compute_of(to) else { continue };
            let link = self.control_link(c, r);
            let seq = i as u64 + 1;
            self.engine.record(actor, TraceEvent::Notice { from: dead, to, seq, failure });
            self.send_fifo(
                now,
                SimTime::ZERO,
                actor,
                ActorId::Process(to),
                Msg::Signal { signal: Signal::GroupFailureNotice { about: dead, seq, failure }, fill: vec![], via: None },
                link,
            );
        }
    }
}

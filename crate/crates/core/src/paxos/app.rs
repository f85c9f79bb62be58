//! Runs replicas and a client as rack processes.
//!
//! Each replica keeps its durable state in an arena on its rack's memory
//! and persists before acting. A leader carries out control commands once
//! they are chosen: it asks the Rack MMU to reincarnate a member, or
//! revokes and fences a removed one, starts its replacement and pushes it a
//! snapshot of its own arena.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::addr::{ComputeId, MemId, ProcessId, RackId, PAGE_SIZE};
use crate::heap::{Arena, HeapError, PageMemory, RackMemory, VecMemory};
use crate::latency::LinkClass;
use crate::memory::Fault;
use crate::monitor::{FastFailureHandler, HandlerStep};
use crate::os::{ComputeState, FailureDescriptor, Signal, SignalKind};
use crate::rack::{App, AppEvent, Origin, Rack, RackConfig, ReqId, SysReply};
use crate::time::SimTime;

use super::core::{Effect, Output, Peer, Replica, Timing};
use super::store::{self, Layout, ARENA_PAGES};
use super::types::{Command, Config, MemberId, PeerMsg, Status, Strategy, Wire};

/// Role tag of the client process.
pub const CLIENT_ROLE: u64 = 1000;
/// Spawned processes with role `JOIN_ROLE + m` become member `m`.
pub const JOIN_ROLE: u64 = 100;

const TICK: u64 = 1;
const CLIENT_TICK: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PaxosParams {
    pub strategy: Strategy,
    pub replicas: u16,
    pub commands: u32,
    pub command_interval: SimTime,
    pub client_start: SimTime,
}

impl Default for PaxosParams {
    fn default() -> Self {
        PaxosParams {
            strategy: Strategy::Reincarnate,
            replicas: 3,
            commands: 20,
            command_interval: SimTime::from_micros(40),
            client_start: SimTime::from_micros(100),
        }
    }
}

struct ReplicaNode {
    core: Replica,
    arena: Arena,
    layout: Layout,
    // pids the failure group and MMU group were last registered with
    registered: Vec<ProcessId>,
}

struct ClientNode {
    view: BTreeMap<MemberId, Peer>,
    next: u32,
}

enum Node {
    Replica(Box<ReplicaNode>),
    /// Started by a leader; waits for its snapshot.
    Joiner { member: MemberId },
    Client(ClientNode),
    Halted,
}

#[derive(Debug, Clone, Copy)]
enum PendingOp {
    Reincarnate { member: MemberId, dead: ProcessId, spare: ComputeId },
    Retire { old: ProcessId },
    Join { member: MemberId, spare: ComputeId },
}

pub struct PaxosApp {
    params: PaxosParams,
    timing: Timing,
    config: Config,
    roster: BTreeMap<MemberId, ProcessId>,
    client: ProcessId,
    nodes: BTreeMap<ProcessId, Node>,
    ops: BTreeMap<(ProcessId, ReqId), PendingOp>,
    // spares promised to an in-flight start
    reserved: BTreeSet<ComputeId>,
}

fn heap_err(e: impl std::fmt::Display) -> HeapError {
    HeapError::CorruptArena(e.to_string())
}

impl PaxosApp {
    pub fn timing(&self) -> Timing {
        self.timing
    }

    pub fn params(&self) -> &PaxosParams {
        &self.params
    }

    pub fn client(&self) -> ProcessId {
        self.client
    }

    /// Processes running a replica with installed state.
    pub fn replicas(&self) -> impl Iterator<Item = (ProcessId, &Replica)> {
        self.nodes.iter().filter_map(|(&p, n)| match n {
            Node::Replica(r) => Some((p, &r.core)),
            _ => None,
        })
    }

    fn initial_view(&self) -> BTreeMap<MemberId, Peer> {
        self.roster.iter().map(|(&m, &pid)| (m, Peer { pid, incarnation: 0 })).collect()
    }

    // only never-used computes: one that hosted a failed replica may be
    // about to be fenced
    fn find_spare<N>(&self, rack: &Rack<N>, r: RackId) -> Option<ComputeId> {
        let cfg = rack.config();
        (0..cfg.computes_per_rack).map(|i| cfg.compute(r.0, i)).find(|&c| {
            let ce = rack.compute(c).expect("configured compute");
            ce.state == ComputeState::Alive
                && !rack.is_fenced(c)
                && !self.reserved.contains(&c)
                && ce.processes.is_empty()
        })
    }

    // ----- replica lifecycle -----------------------------------------------

    fn set_handlers(rack: &mut Rack<Wire>, pid: ProcessId) {
        let _ = rack.sys_set_handler(pid, SignalKind::MemoryFault, true);
        let _ = rack.sys_set_handler(pid, SignalKind::GroupFailureNotice, true);
    }

    /// Keeps the failure group, the MMU group and the monitor handler in
    /// line with the replica's current view of its peers.
    fn register(&self, rack: &mut Rack<Wire>, pid: ProcessId, node: &mut ReplicaNode, first: bool) {
        let peers: Vec<ProcessId> =
            node.core.durable().view.values().map(|p| p.pid).filter(|&p| p != pid).collect();
        if !first && peers == node.registered {
            return;
        }
        let live: Vec<ProcessId> = peers.iter().copied().filter(|&p| rack.process(p).is_some()).collect();
        let _ = rack.sys_register_failure_group(pid, &live);
        let mut group = live.clone();
        group.push(pid);
        let _ = rack.sys_register_group(pid, &group);
        node.registered = peers;
        if first && self.params.strategy == Strategy::Reincarnate {
            let Some(c) = rack.compute_of(pid) else { return };
            let r = rack.rack_of(c);
            if let Some(spare) = self.find_spare(rack, r) {
                let steps =
                    vec![HandlerStep::RequestProvision { compute: spare }, HandlerStep::TriggerStealOnBehalf, HandlerStep::FenceCompute];
                let _ = rack.register_fast_failure_handler(pid, FastFailureHandler { steps });
            }
        }
    }

    fn init_replica(&self, rack: &mut Rack<Wire>, pid: ProcessId, member: MemberId) -> Result<ReplicaNode, HeapError> {
        Self::set_handlers(rack, pid);
        let pages = rack.alloc_now(pid, ARENA_PAGES, true).map_err(heap_err)?;
        let (arena, layout) = store::format(&mut RackMemory::new(rack, pid), pages)?;
        let core = Replica::new(
            member,
            self.config.clone(),
            self.initial_view(),
            Some(self.client),
            self.params.strategy,
            self.timing,
        );
        Ok(ReplicaNode { core, arena, layout, registered: Vec::new() })
    }

    fn restore_replica(
        &self,
        rack: &mut Rack<Wire>,
        pid: ProcessId,
        pages: Vec<crate::addr::VirtualPage>,
    ) -> Result<ReplicaNode, HeapError> {
        Self::set_handlers(rack, pid);
        let mut mem = RackMemory::new(rack, pid);
        let (arena, layout) = store::open(&mut mem, pages)?;
        let d = store::load(&mut mem, &arena, layout)?;
        let now = rack.now();
        let mut core = Replica::restore(d, self.params.strategy, self.timing, now);
        core.reincarnated(pid);
        Ok(ReplicaNode { core, arena, layout, registered: Vec::new() })
    }

    fn install_snapshot(
        &self,
        rack: &mut Rack<Wire>,
        pid: ProcessId,
        member: MemberId,
        image: &[u8],
        pages: Vec<crate::addr::VirtualPage>,
    ) -> Result<ReplicaNode, HeapError> {
        if image.len() != pages.len() * PAGE_SIZE {
            return Err(HeapError::CorruptArena("snapshot size does not match its pages".into()));
        }
        let mut view = VecMemory::new();
        for (i, page) in pages.iter().enumerate() {
            view.write(page.base(), &image[i * PAGE_SIZE..(i + 1) * PAGE_SIZE])?;
        }
        let (arena, layout) = store::open(&mut view, pages)?;
        let mut d = store::load(&mut view, &arena, layout)?;
        // a new acceptor has promised and accepted nothing; it only takes
        // what is known to be chosen
        d.log.retain(|_, e| e.status == Status::Chosen);
        d.me = member;
        d.incarnation = 0;
        d.promised = Default::default();
        d.lead = Default::default();
        d.view.insert(member, Peer { pid, incarnation: 0 });
        Self::set_handlers(rack, pid);
        let own = rack.alloc_now(pid, ARENA_PAGES, true).map_err(heap_err)?;
        let (arena, layout) = store::format(&mut RackMemory::new(rack, pid), own)?;
        let mut core = Replica::restore(d, self.params.strategy, self.timing, rack.now());
        core.mark_all_dirty();
        Ok(ReplicaNode { core, arena, layout, registered: Vec::new() })
    }

    /// Persists what the outputs depend on, then performs them. Returns
    /// false if the replica halted.
    fn flush(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, node: &mut ReplicaNode, outs: Vec<Output>) -> bool {
        let (meta, slots) = node.core.take_dirty();
        if meta || !slots.is_empty() {
            let r = {
                let mut mem = RackMemory::new(rack, pid);
                store::persist(&mut mem, &mut node.arena, node.layout, node.core.durable(), meta, &slots)
            };
            if let Err(e) = r {
                self.halt(rack, pid, node, e);
                return false;
            }
        }
        let member = node.core.me().0;
        for o in outs {
            match o {
                Output::Send { to, msg } => {
                    let bytes = msg.body.wire_bytes();
                    let _ = rack.send(pid, to, Wire::Peer(msg), bytes);
                }
                Output::Applied { slot, cmd, epoch } => {
                    let done = rack.busy_until(pid).as_nanos();
                    rack.app_event(
                        pid,
                        "paxos",
                        "apply",
                        json!({ "member": member, "slot": slot, "cmd": cmd.to_string(), "epoch": epoch, "done_ns": done }),
                    );
                }
                Output::Effect(e) => self.effect(rack, pid, node, e),
            }
        }
        self.register(rack, pid, node, false);
        true
    }

    fn halt(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, node: &ReplicaNode, e: HeapError) {
        let member = node.core.me().0;
        if let HeapError::Fault(Fault::ElementError | Fault::Timeout) = e {
            if let Some(element) = self.failed_element(rack, pid, &node.arena) {
                let fault = rack.busy_until(pid).as_nanos();
                let sent = rack.sys_notify_group(pid, FailureDescriptor::Memory { element }).unwrap_or(0);
                rack.app_event(
                    pid,
                    "paxos",
                    "memory-failure",
                    json!({ "member": member, "element": element, "notices": sent, "fault_ns": fault }),
                );
            }
        }
        rack.app_event(pid, "paxos", "halt", json!({ "member": member, "error": e.to_string() }));
        rack.exit(pid, "replica halted");
    }

    fn failed_element(&self, rack: &Rack<Wire>, pid: ProcessId, arena: &Arena) -> Option<MemId> {
        arena.pages().iter().find_map(|page| {
            let frame = rack.mmu().table(pid)?.entries.get(page)?.frame;
            (!rack.memory(frame.element)?.is_alive()).then_some(frame.element)
        })
    }

    fn effect(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, node: &mut ReplicaNode, e: Effect) {
        let member = node.core.me().0;
        match e {
            Effect::Reincarnate { member: m, dead, rack: r } => {
                let spare = self.find_spare(rack, r);
                let req = spare.map(|c| (c, rack.sys_reincarnate(pid, dead, c)));
                match req {
                    Some((c, Ok(req))) => {
                        self.reserved.insert(c);
                        self.ops.insert((pid, req), PendingOp::Reincarnate { member: m, dead, spare: c });
                        rack.app_event(pid, "paxos", "reincarnate", json!({ "by": member, "member": m.0, "dead": dead }));
                    }
                    _ => {
                        let outs = node.core.on_reincarnate_failed(rack.now(), m);
                        self.flush(rack, pid, node, outs);
                    }
                }
            }
            Effect::Retire { member: m, old } => {
                rack.app_event(pid, "paxos", "retire", json!({ "by": member, "member": m.0, "old": old }));
                match rack.sys_revoke(pid, old, None) {
                    Ok(req) => {
                        self.ops.insert((pid, req), PendingOp::Retire { old });
                    }
                    Err(_) => Self::fence_process(rack, pid, old),
                }
            }
            Effect::Join { member: m, rack: r } => {
                let Some(spare) = self.find_spare(rack, r) else { return };
                if let Ok(req) = rack.sys_spawn(pid, spare, JOIN_ROLE + u64::from(m.0)) {
                    self.reserved.insert(spare);
                    self.ops.insert((pid, req), PendingOp::Join { member: m, spare });
                }
            }
        }
    }

    fn fence_process(rack: &mut Rack<Wire>, by: ProcessId, old: ProcessId) {
        if let Some(c) = rack.compute_of(old) {
            if !rack.is_fenced(c) {
                rack.app_event(by, "paxos", "fence", json!({ "compute": c, "process": old }));
                rack.fence(c);
            }
        }
    }

    fn syscall_done(
        &mut self,
        rack: &mut Rack<Wire>,
        pid: ProcessId,
        node: &mut ReplicaNode,
        req: ReqId,
        result: Result<SysReply, crate::mmu::MmuError>,
    ) -> bool {
        let Some(op) = self.ops.remove(&(pid, req)) else { return true };
        match op {
            PendingOp::Reincarnate { member, dead, spare } => {
                self.reserved.remove(&spare);
                match result {
                    Ok(_) => {
                        Self::fence_process(rack, pid, dead);
                        true
                    }
                    Err(_) => {
                        let outs = node.core.on_reincarnate_failed(rack.now(), member);
                        self.flush(rack, pid, node, outs)
                    }
                }
            }
            PendingOp::Retire { old } => {
                Self::fence_process(rack, pid, old);
                true
            }
            PendingOp::Join { member, spare } => {
                self.reserved.remove(&spare);
                let Ok(SysReply::Spawned { pid: new }) = result else { return true };
                let outs = node.core.set_peer(member, new, 0, rack.now());
                if !self.flush(rack, pid, node, outs) {
                    return false;
                }
                self.send_snapshot(rack, pid, node, member, new)
            }
        }
    }

    fn send_snapshot(
        &mut self,
        rack: &mut Rack<Wire>,
        pid: ProcessId,
        node: &mut ReplicaNode,
        member: MemberId,
        to: ProcessId,
    ) -> bool {
        let pages = node.arena.pages().to_vec();
        let mut image = Vec::with_capacity(pages.len() * PAGE_SIZE);
        for page in &pages {
            match RackMemory::new(rack, pid).read(page.base(), PAGE_SIZE) {
                Ok(b) => image.extend_from_slice(&b),
                Err(e) => {
                    self.halt(rack, pid, node, e);
                    return false;
                }
            }
        }
        let msg = Wire::Snapshot { member, image, pages };
        let bytes = msg.wire_bytes();
        rack.app_event(
            pid,
            "paxos",
            "snapshot",
            json!({ "from": node.core.me().0, "member": member.0, "to": to, "bytes": bytes }),
        );
        let _ = rack.send(pid, to, msg, bytes);
        true
    }

    fn replica_event(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, node: &mut ReplicaNode, ev: AppEvent<Wire>) -> bool {
        let now = rack.now();
        let outs = match ev {
            AppEvent::Timer { token: TICK } => {
                let outs = node.core.on_tick(now);
                let alive = self.flush(rack, pid, node, outs);
                if alive {
                    let _ = rack.set_timer(pid, self.timing.heartbeat, TICK);
                }
                return alive;
            }
            AppEvent::Net { from, msg: Wire::Peer(m) } => node.core.on_message(now, from, m),
            AppEvent::Net { msg: Wire::Client(cmd), .. } => node.core.on_client(now, cmd),
            AppEvent::SyscallDone { req, result } => return self.syscall_done(rack, pid, node, req, result),
            AppEvent::Signal(Signal::GroupFailureNotice { about, failure, .. }) => {
                node.core.on_failure_notice(now, about, failure)
            }
            _ => return true,
        };
        self.flush(rack, pid, node, outs)
    }

    /// Brings a replica online: registration, durable state, announcement.
    fn start_replica(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, mut node: ReplicaNode, event: &'static str) -> Node {
        node.core.set_racks((0..rack.config().racks).map(RackId));
        self.register(rack, pid, &mut node, true);
        let d = node.core.durable();
        let fields = json!({
            "member": d.me.0,
            "incarnation": d.incarnation,
            "applied": d.applied,
            "epoch": d.config.epoch,
            "leader": node.core.is_leader(),
        });
        if !self.flush(rack, pid, &mut node, Vec::new()) {
            return Node::Halted;
        }
        let done = rack.busy_until(pid).as_nanos();
        let mut fields = fields;
        fields["done_ns"] = json!(done);
        rack.app_event(pid, "paxos", event, fields);
        let now = rack.now();
        let mut outs = node.core.resume(now);
        if event == "started" && node.core.me() == MemberId(0) {
            outs.extend(node.core.campaign(now));
        }
        if !self.flush(rack, pid, &mut node, outs) {
            return Node::Halted;
        }
        let _ = rack.set_timer(pid, self.timing.heartbeat, TICK);
        Node::Replica(Box::new(node))
    }

    fn started(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, origin: Origin) -> Node {
        let built = match origin {
            Origin::Initial { role: CLIENT_ROLE } => {
                let _ = rack.set_timer(pid, self.params.client_start, CLIENT_TICK);
                return Node::Client(ClientNode { view: self.initial_view(), next: 0 });
            }
            Origin::Initial { role } => self.init_replica(rack, pid, MemberId(role as u8)).map(|n| (n, "started")),
            Origin::Spawned { role, .. } if role >= JOIN_ROLE => {
                Self::set_handlers(rack, pid);
                return Node::Joiner { member: MemberId((role - JOIN_ROLE) as u8) };
            }
            Origin::Spawned { .. } => return Node::Halted,
            Origin::Reincarnated { pages, .. } => self.restore_replica(rack, pid, pages).map(|n| (n, "resumed")),
        };
        match built {
            Ok((node, event)) => self.start_replica(rack, pid, node, event),
            Err(e) => {
                rack.app_event(pid, "paxos", "halt", json!({ "error": e.to_string() }));
                rack.exit(pid, "replica failed to start");
                Node::Halted
            }
        }
    }

    fn client_event(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, c: &mut ClientNode, ev: AppEvent<Wire>) {
        match ev {
            AppEvent::Timer { token: CLIENT_TICK } => {
                if c.next >= self.params.commands {
                    return;
                }
                c.next += 1;
                let id = u64::from(c.next);
                let cmd = Command::Client { id, value: id.wrapping_mul(2_654_435_761) % 1_000_003 };
                rack.app_event(pid, "paxos", "request", json!({ "id": id }));
                for p in c.view.values() {
                    let _ = rack.send(pid, p.pid, Wire::Client(cmd), 64);
                }
                if c.next < self.params.commands {
                    let _ = rack.set_timer(pid, self.params.command_interval, CLIENT_TICK);
                }
            }
            AppEvent::Net { msg: Wire::Peer(PeerMsg { body: super::types::Body::Hello { view, .. }, header }), from } => {
                let mut learn = |m: MemberId, pid: ProcessId, inc: u32| {
                    if c.view.get(&m).is_none_or(|p| inc > p.incarnation || (inc == p.incarnation && pid != p.pid)) {
                        c.view.insert(m, Peer { pid, incarnation: inc });
                    }
                };
                learn(header.member, from, header.incarnation);
                for (m, p, inc) in view {
                    learn(m, p, inc);
                }
            }
            _ => {}
        }
    }
}

impl App<Wire> for PaxosApp {
    fn on_event(&mut self, rack: &mut Rack<Wire>, pid: ProcessId, ev: AppEvent<Wire>) {
        let node = match self.nodes.remove(&pid) {
            None => match ev {
                AppEvent::Started { origin } => self.started(rack, pid, origin),
                _ => return,
            },
            Some(Node::Replica(mut n)) => {
                if self.replica_event(rack, pid, &mut n, ev) {
                    Node::Replica(n)
                } else {
                    Node::Halted
                }
            }
            Some(Node::Joiner { member }) => match ev {
                AppEvent::Net { msg: Wire::Snapshot { member: m, image, pages }, .. } if m == member => {
                    match self.install_snapshot(rack, pid, member, &image, pages) {
                        Ok(n) => self.start_replica(rack, pid, n, "installed"),
                        Err(e) => {
                            rack.app_event(pid, "paxos", "halt", json!({ "member": member.0, "error": e.to_string() }));
                            rack.exit(pid, "snapshot install failed");
                            Node::Halted
                        }
                    }
                }
                _ => Node::Joiner { member },
            },
            Some(Node::Client(mut c)) => {
                self.client_event(rack, pid, &mut c, ev);
                Node::Client(c)
            }
            Some(Node::Halted) => Node::Halted,
        };
        self.nodes.insert(pid, node);
    }
}

/// A replica group and its client in a fresh rack deployment. Replica `i`
/// runs on compute 0 of rack `i`; the client runs in the last rack.
pub struct PaxosCluster {
    pub rack: Rack<Wire>,
    pub app: PaxosApp,
}

impl PaxosCluster {
    pub fn new(config: RackConfig, params: PaxosParams) -> Result<PaxosCluster, String> {
        if params.replicas == 0 || params.replicas as u8 > super::types::MAX_MEMBERS {
            return Err(format!("replicas must be in 1..={}", super::types::MAX_MEMBERS));
        }
        if config.racks <= params.replicas {
            return Err(format!("{} replicas need {} racks (one more for the client)", params.replicas, params.replicas + 1));
        }
        if config.computes_per_rack < 2 || config.memory_per_rack == 0 {
            return Err("each rack needs a spare compute element and a memory element".into());
        }
        let mut rack: Rack<Wire> = Rack::new(config.clone())?;
        let timing = Timing::for_cross_rack_rtt(rack.rtt(LinkClass::CrossRackTor));
        let mut roster = BTreeMap::new();
        let racks: Vec<RackId> = (0..params.replicas).map(RackId).collect();
        for (i, &r) in racks.iter().enumerate() {
            let pid = rack
                .spawn(config.compute(r.0, 0), Origin::Initial { role: i as u64 })
                .map_err(|e| e.to_string())?;
            roster.insert(MemberId(i as u8), pid);
        }
        let client = rack
            .spawn(config.compute(params.replicas, 0), Origin::Initial { role: CLIENT_ROLE })
            .map_err(|e| e.to_string())?;
        let pids: Vec<_> = roster.values().copied().collect();
        rack.register_group(&pids).map_err(|e| e.to_string())?;
        let app = PaxosApp {
            config: Config::initial(&racks),
            params,
            timing,
            roster,
            client,
            nodes: BTreeMap::new(),
            ops: BTreeMap::new(),
            reserved: BTreeSet::new(),
        };
        Ok(PaxosCluster { rack, app })
    }

    /// Initial pid of member `m`.
    pub fn initial_pid(&self, m: MemberId) -> Option<ProcessId> {
        self.app.roster.get(&m).copied()
    }

    pub fn run_until(&mut self, t: SimTime) {
        self.rack.run_until(&mut self.app, t);
    }

    /// The current leader as seen by a running replica that believes it
    /// leads, with its compute element.
    pub fn leader(&self) -> Option<(ProcessId, ComputeId)> {
        self.app
            .replicas()
            .filter(|(p, r)| r.is_leader() && self.rack.is_running(*p))
            .find_map(|(p, _)| Some((p, self.rack.compute_of(p)?)))
    }

    /// Highest configuration epoch among running replicas.
    pub fn epoch(&self) -> u64 {
        self.app.replicas().filter(|(p, _)| self.rack.is_running(*p)).map(|(_, r)| r.epoch()).max().unwrap_or(0)
    }
}

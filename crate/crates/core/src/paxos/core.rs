//! The replica state machine, free of any rack plumbing.
//!
//! Every input returns the outputs it caused. Durable fields changed by
//! the input are marked dirty; the driver must persist them (see
//! [`Replica::take_dirty`]) before it performs any output, so nothing is
//! ever sent that a reincarnated replica would not remember.
//!
//! The protocol is Multi-Paxos with one slot in flight. The configuration
//! for slot `n` is the one left by applying slots `0..n`, so a leader only
//! proposes at its first unchosen slot and restarts phase 1 whenever the
//! configuration changes under it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::addr::{ProcessId, RackId};
use crate::os::FailureDescriptor;
use crate::time::SimTime;

use super::types::{Ballot, Body, Command, Config, Entry, Header, MemberId, PeerMsg, Status, Strategy, MAX_MEMBERS};

/// Slots a replica's log can hold.
pub const LOG_CAPACITY: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Timing {
    pub heartbeat: SimTime,
    /// Silence after which a peer is suspected.
    pub suspicion: SimTime,
    /// Extra wait per election rank.
    pub backoff: SimTime,
    pub retransmit: SimTime,
}

impl Timing {
    /// Heartbeats three times per cross-rack round trip, suspicion after
    /// three round trips.
    pub fn for_cross_rack_rtt(rtt: SimTime) -> Timing {
        Timing { heartbeat: rtt / 3, suspicion: rtt * 3, backoff: rtt * 4 / 3, retransmit: rtt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Peer {
    pub pid: ProcessId,
    pub incarnation: u32,
}

/// The part of a replica that lives in its arena.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Durable {
    pub me: MemberId,
    pub incarnation: u32,
    pub promised: Ballot,
    /// Ballot this replica finished phase 1 with, if it led.
    pub lead: Ballot,
    pub log: BTreeMap<u32, Entry>,
    /// Slots below this are applied.
    pub applied: u32,
    pub config: Config,
    pub view: BTreeMap<MemberId, Peer>,
    pub client: Option<ProcessId>,
}

/// Control-plane work only the leader performs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Effect {
    /// Steal `dead`'s memory to a fresh process on a spare element in `rack`.
    Reincarnate { member: MemberId, dead: ProcessId, rack: RackId },
    /// Revoke the removed member's memory and fence its element.
    Retire { member: MemberId, old: ProcessId },
    /// Start `member` on `rack` and send it a snapshot.
    Join { member: MemberId, rack: RackId },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Output {
    Send { to: ProcessId, msg: PeerMsg },
    /// Slot applied; recorded once the state is durable.
    Applied { slot: u32, cmd: Command, epoch: u64 },
    Effect(Effect),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Inflight {
    slot: u32,
    acks: BTreeSet<MemberId>,
    sent: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Role {
    Follower,
    Candidate { ballot: Ballot, from: u32, promises: BTreeMap<MemberId, Vec<(u32, Entry)>>, started: SimTime },
    Leader { ballot: Ballot, inflight: Option<Inflight> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Replica {
    d: Durable,
    strategy: Strategy,
    timing: Timing,
    role: Role,
    leader: Option<MemberId>,
    last_leader: SimTime,
    election_at: Option<SimTime>,
    max_round: u32,
    queue: VecDeque<Command>,
    buffer: Vec<Command>,
    chosen_ids: BTreeSet<u64>,
    last_ack: BTreeMap<MemberId, SimTime>,
    control_pending: BTreeSet<MemberId>,
    memory_failed: BTreeSet<MemberId>,
    // racks a replacement may be placed on, and those known to have no
    // usable memory
    racks: BTreeSet<RackId>,
    dead_racks: BTreeSet<RackId>,
    joining: BTreeMap<MemberId, SimTime>,
    dirty_meta: bool,
    dirty_slots: BTreeSet<u32>,
}

type Out = Vec<Output>;

impl Replica {
    /// A member of the initial configuration with an empty log.
    pub fn new(
        me: MemberId,
        config: Config,
        view: BTreeMap<MemberId, Peer>,
        client: Option<ProcessId>,
        strategy: Strategy,
        timing: Timing,
    ) -> Replica {
        let d = Durable {
            me,
            incarnation: 0,
            promised: Ballot::ZERO,
            lead: Ballot::ZERO,
            log: BTreeMap::new(),
            applied: 0,
            config,
            view,
            client,
        };
        let mut r = Replica::from_durable(d, strategy, timing, SimTime::ZERO);
        r.dirty_meta = true;
        r
    }

    /// Rebuilds a replica from durable state. A replica that was leading
    /// and has promised nothing since resumes leading under the same
    /// ballot; everything it proposed is in its own log.
    pub fn restore(d: Durable, strategy: Strategy, timing: Timing, now: SimTime) -> Replica {
        let mut r = Replica::from_durable(d, strategy, timing, now);
        let d = &r.d;
        if d.lead != Ballot::ZERO && d.lead == d.promised && d.lead.proposer == d.me && d.config.contains(d.me) {
            r.role = Role::Leader { ballot: d.lead, inflight: None };
            r.leader = Some(d.me);
        }
        r
    }

    fn from_durable(mut d: Durable, strategy: Strategy, timing: Timing, now: SimTime) -> Replica {
        // an accept implies the matching promise
        if let Some(top) = d.log.values().map(|e| e.ballot).max() {
            d.promised = d.promised.max(top);
        }
        let chosen_ids = d
            .log
            .values()
            .filter(|e| e.status == Status::Chosen)
            .filter_map(|e| e.cmd.client_id())
            .collect();
        let last_ack = d.config.members.keys().map(|&m| (m, now)).collect();
        let max_round = d.promised.round;
        Replica {
            d,
            strategy,
            timing,
            role: Role::Follower,
            leader: None,
            last_leader: now,
            election_at: None,
            max_round,
            queue: VecDeque::new(),
            buffer: Vec::new(),
            chosen_ids,
            last_ack,
            control_pending: BTreeSet::new(),
            memory_failed: BTreeSet::new(),
            racks: BTreeSet::new(),
            dead_racks: BTreeSet::new(),
            joining: BTreeMap::new(),
            dirty_meta: false,
            dirty_slots: BTreeSet::new(),
        }
    }

    // ----- inspection ------------------------------------------------------

    pub fn durable(&self) -> &Durable {
        &self.d
    }

    pub fn me(&self) -> MemberId {
        self.d.me
    }

    pub fn epoch(&self) -> u64 {
        self.d.config.epoch
    }

    pub fn config(&self) -> &Config {
        &self.d.config
    }

    pub fn applied(&self) -> u32 {
        self.d.applied
    }

    pub fn is_leader(&self) -> bool {
        matches!(self.role, Role::Leader { .. })
    }

    pub fn ballot(&self) -> Option<Ballot> {
        match &self.role {
            Role::Leader { ballot, .. } | Role::Candidate { ballot, .. } => Some(*ballot),
            Role::Follower => None,
        }
    }

    pub fn leader(&self) -> Option<MemberId> {
        self.leader
    }

    pub fn member_of(&self, pid: ProcessId) -> Option<MemberId> {
        self.d.view.iter().find(|(_, p)| p.pid == pid).map(|(&m, _)| m)
    }

    pub fn pid_of(&self, m: MemberId) -> Option<ProcessId> {
        self.d.view.get(&m).map(|p| p.pid)
    }

    /// Durable changes since the last call: whether the meta block changed,
    /// and which log slots did.
    /// Marks the whole durable state for persisting, as when it moves to
    /// a fresh arena.
    pub fn mark_all_dirty(&mut self) {
        self.dirty_meta = true;
        self.dirty_slots = self.d.log.keys().copied().collect();
    }

    pub fn take_dirty(&mut self) -> (bool, Vec<u32>) {
        let meta = std::mem::take(&mut self.dirty_meta);
        let slots = std::mem::take(&mut self.dirty_slots).into_iter().collect();
        (meta, slots)
    }

    // ----- plumbing --------------------------------------------------------

    fn header(&self) -> Header {
        Header { member: self.d.me, incarnation: self.d.incarnation, epoch: self.d.config.epoch }
    }

    fn send_pid(&self, out: &mut Out, to: ProcessId, body: Body) {
        out.push(Output::Send { to, msg: PeerMsg { header: self.header(), body } });
    }

    fn send(&self, out: &mut Out, to: MemberId, body: Body) {
        if let Some(p) = self.d.view.get(&to) {
            self.send_pid(out, p.pid, body);
        }
    }

    fn broadcast(&self, out: &mut Out, body: &Body) {
        for &m in self.d.config.members.keys() {
            if m != self.d.me {
                self.send(out, m, body.clone());
            }
        }
    }

    fn is_member(&self) -> bool {
        self.d.config.contains(self.d.me)
    }

    fn set_promised(&mut self, b: Ballot) {
        if b > self.d.promised {
            self.d.promised = b;
            self.dirty_meta = true;
        }
        self.max_round = self.max_round.max(b.round);
    }

    fn put(&mut self, slot: u32, e: Entry) {
        self.d.log.insert(slot, e);
        self.dirty_slots.insert(slot);
    }

    /// Records a peer's location. Returns false for a message from an
    /// older incarnation than one already seen.
    fn note_peer(&mut self, out: &mut Out, m: MemberId, pid: ProcessId, incarnation: u32, now: SimTime) -> bool {
        let known = self.d.config.contains(m) || m.0 >= self.d.config.next_member;
        if !known || m == self.d.me {
            return true;
        }
        match self.d.view.get(&m) {
            Some(p) if incarnation < p.incarnation => return false,
            Some(p) if p.pid == pid && p.incarnation == incarnation => return true,
            _ => {}
        }
        self.d.view.insert(m, Peer { pid, incarnation });
        self.dirty_meta = true;
        self.last_ack.insert(m, now);
        self.joining.remove(&m);
        if self.leader == Some(m) {
            self.forward_buffer(out);
        }
        true
    }

    fn forward_buffer(&self, out: &mut Out) {
        if let Some(l) = self.leader.filter(|&l| l != self.d.me) {
            if !self.buffer.is_empty() {
                self.send(out, l, Body::Forward { cmds: self.buffer.clone() });
            }
        }
    }

    fn follow(&mut self, out: &mut Out, m: MemberId, now: SimTime) {
        let changed = self.leader != Some(m);
        self.leader = Some(m);
        self.last_leader = now;
        self.election_at = None;
        if m != self.d.me && !matches!(self.role, Role::Follower) {
            self.role = Role::Follower;
        }
        if changed {
            self.forward_buffer(out);
        }
    }

    fn rank(&self, excluding: Option<MemberId>) -> u64 {
        self.d
            .config
            .members
            .keys()
            .filter(|&&m| Some(m) != excluding)
            .position(|&m| m == self.d.me)
            .unwrap_or(0) as u64
    }

    fn in_use(&self, id: u64) -> bool {
        if self.chosen_ids.contains(&id) {
            return true;
        }
        let ballot = self.ballot();
        self.d.log.range(self.d.applied..).any(|(_, e)| e.cmd.client_id() == Some(id) && Some(e.ballot) == ballot)
            || self.queue.iter().any(|c| c.client_id() == Some(id))
    }

    fn enqueue(&mut self, cmd: Command) {
        if let Some(id) = cmd.client_id() {
            if self.in_use(id) {
                return;
            }
        }
        self.queue.push_back(cmd);
    }

    // ----- inputs ----------------------------------------------------------

    pub fn on_message(&mut self, now: SimTime, from: ProcessId, msg: PeerMsg) -> Out {
        let mut out = Vec::new();
        let h = msg.header;
        if !self.note_peer(&mut out, h.member, from, h.incarnation, now) {
            return out;
        }
        let epoch = self.d.config.epoch;
        if h.epoch > epoch {
            self.send_pid(&mut out, from, Body::CatchupRequest { from: self.d.applied });
        }
        let current = h.epoch == epoch && self.d.config.contains(h.member) && self.is_member();
        match msg.body {
            Body::Chosen { slot, cmd } => {
                self.learn(&mut out, from, slot, cmd);
                self.apply(&mut out, now);
            }
            Body::Catchup { entries } => {
                for (slot, cmd) in entries {
                    self.learn(&mut out, from, slot, cmd);
                }
                self.apply(&mut out, now);
            }
            Body::CatchupRequest { from: start } => {
                let entries: Vec<_> = self
                    .d
                    .log
                    .range(start..)
                    .filter(|(_, e)| e.status == Status::Chosen)
                    .take(64)
                    .map(|(&s, e)| (s, e.cmd))
                    .collect();
                if !entries.is_empty() {
                    self.send_pid(&mut out, from, Body::Catchup { entries });
                }
            }
            Body::Hello { view, reply } => {
                for (m, pid, inc) in view {
                    let before = self.d.view.get(&m).copied();
                    self.note_peer(&mut out, m, pid, inc, now);
                    if m != h.member && self.d.view.get(&m) != before.as_ref() {
                        // tell a newly learned peer where we are
                        self.send_pid(&mut out, pid, Body::Hello { view: self.view_list(), reply: false });
                    }
                }
                if reply {
                    self.send_pid(&mut out, from, Body::Hello { view: self.view_list(), reply: false });
                }
            }
            body if current => self.on_current(&mut out, now, h.member, from, body),
            _ => {}
        }
        out
    }

    fn on_current(&mut self, out: &mut Out, now: SimTime, m: MemberId, from: ProcessId, body: Body) {
        match body {
            Body::Prepare { ballot, from: start } => {
                if ballot >= self.d.promised {
                    self.set_promised(ballot);
                    if ballot.proposer != self.d.me {
                        self.follow(out, ballot.proposer, now);
                    }
                    let entries = self.d.log.range(start..).map(|(&s, e)| (s, *e)).collect();
                    let mut pending: Vec<Command> = self.buffer.clone();
                    pending.extend(self.queue.iter().copied());
                    self.send_pid(out, from, Body::Promise { ballot, entries, pending });
                } else {
                    self.send_pid(out, from, Body::Nack { ballot, promised: self.d.promised });
                }
            }
            Body::Promise { ballot, entries, pending } => {
                if let Role::Candidate { ballot: b, promises, .. } = &mut self.role {
                    if *b == ballot {
                        promises.insert(m, entries);
                        for c in pending {
                            self.enqueue(c);
                        }
                        self.maybe_lead(out, now);
                    }
                }
            }
            Body::Accept { ballot, slot, cmd } => {
                if ballot >= self.d.promised {
                    self.set_promised(ballot);
                    if ballot.proposer != self.d.me {
                        self.follow(out, ballot.proposer, now);
                    }
                    if slot >= LOG_CAPACITY {
                        return;
                    }
                    let chosen = self.d.log.get(&slot).is_some_and(|e| e.status == Status::Chosen);
                    if !chosen {
                        self.put(slot, Entry { status: Status::Accepted, ballot, cmd });
                    }
                    self.send_pid(out, from, Body::Accepted { ballot, slot });
                } else {
                    self.send_pid(out, from, Body::Nack { ballot, promised: self.d.promised });
                }
            }
            Body::Accepted { ballot, slot } => {
                let quorum = self.d.config.quorum();
                let Role::Leader { ballot: b, inflight: Some(f) } = &mut self.role else { return };
                if *b != ballot || f.slot != slot {
                    return;
                }
                f.acks.insert(m);
                if f.acks.len() >= quorum {
                    self.on_chosen(out, now, slot);
                }
            }
            Body::Nack { ballot, promised } => {
                self.max_round = self.max_round.max(promised.round);
                if self.ballot() == Some(ballot) && promised > ballot {
                    self.role = Role::Follower;
                    self.leader = (promised.proposer != self.d.me).then_some(promised.proposer);
                    self.last_leader = now;
                }
            }
            Body::Heartbeat { ballot, chosen_upto } => {
                if ballot < self.d.promised {
                    self.send_pid(out, from, Body::Nack { ballot, promised: self.d.promised });
                    return;
                }
                if ballot.proposer != self.d.me {
                    self.follow(out, ballot.proposer, now);
                }
                if chosen_upto > self.d.applied {
                    self.send_pid(out, from, Body::CatchupRequest { from: self.d.applied });
                }
                self.send_pid(out, from, Body::HeartbeatAck { ballot });
            }
            Body::HeartbeatAck { ballot } => {
                if self.ballot() == Some(ballot) && self.is_leader() {
                    self.last_ack.insert(m, now);
                }
            }
            Body::Forward { cmds } => {
                for c in cmds {
                    self.on_client_cmd(out, now, c, false);
                }
            }
            Body::Chosen { .. } | Body::Catchup { .. } | Body::CatchupRequest { .. } | Body::Hello { .. } => {
                unreachable!("handled for every sender")
            }
        }
    }

    /// A client request arriving at this replica.
    pub fn on_client(&mut self, now: SimTime, cmd: Command) -> Out {
        let mut out = Vec::new();
        self.on_client_cmd(&mut out, now, cmd, true);
        out
    }

    fn on_client_cmd(&mut self, out: &mut Out, now: SimTime, cmd: Command, forward: bool) {
        let Some(id) = cmd.client_id() else { return };
        if self.chosen_ids.contains(&id) {
            return;
        }
        if self.is_leader() {
            self.enqueue(cmd);
            self.propose_next(out, now);
            return;
        }
        if !self.buffer.iter().any(|c| c.client_id() == Some(id)) {
            self.buffer.push(cmd);
        }
        if forward {
            if let Some(l) = self.leader.filter(|&l| l != self.d.me) {
                self.send(out, l, Body::Forward { cmds: vec![cmd] });
            }
        }
    }

    /// A group failure notice about the process `about`.
    pub fn on_failure_notice(&mut self, now: SimTime, about: ProcessId, failure: FailureDescriptor) -> Out {
        let mut out = Vec::new();
        let Some(m) = self.member_of(about) else { return out };
        if !self.d.config.contains(m) {
            return out;
        }
        if matches!(failure, FailureDescriptor::Memory { .. }) {
            self.memory_failed.insert(m);
        }
        if self.is_leader() {
            self.control_pending.remove(&m);
            self.suspect(m, now);
            self.propose_next(&mut out, now);
        } else if self.leader == Some(m) {
            self.leader = None;
            self.election_at = Some(now + self.timing.backoff * self.rank(Some(m)));
            if self.election_at == Some(now) {
                self.start_election(&mut out, now);
            }
        }
        out
    }

    /// The leader's attempt to reincarnate `member` failed; replace it.
    pub fn on_reincarnate_failed(&mut self, now: SimTime, member: MemberId) -> Out {
        let mut out = Vec::new();
        if self.is_leader() && self.d.config.contains(member) {
            self.memory_failed.insert(member);
            self.dead_racks.insert(self.d.config.members[&member]);
            self.control_pending.remove(&member);
            self.suspect(member, now);
            self.propose_next(&mut out, now);
        }
        out
    }

    /// Racks a replacement member may be placed on.
    pub fn set_racks(&mut self, racks: impl IntoIterator<Item = RackId>) {
        self.racks = racks.into_iter().collect();
    }

    /// Learns where a process the driver started runs. It has a snapshot
    /// to install first, so it gets a second suspicion period.
    pub fn set_peer(&mut self, m: MemberId, pid: ProcessId, incarnation: u32, now: SimTime) -> Out {
        let mut out = Vec::new();
        self.note_peer(&mut out, m, pid, incarnation, now);
        self.last_ack.insert(m, now + self.timing.suspicion);
        out
    }

    /// Periodic work: heartbeats, retransmission, suspicion, elections.
    pub fn on_tick(&mut self, now: SimTime) -> Out {
        let mut out = Vec::new();
        if !self.is_member() {
            return out;
        }
        let (ballot, started) = match &self.role {
            Role::Leader { ballot, .. } => (Some(*ballot), None),
            Role::Candidate { started, .. } => (None, Some(*started)),
            Role::Follower => (None, None),
        };
        if let Some(ballot) = ballot {
            self.leader_tick(&mut out, now, ballot);
        } else if let Some(started) = started {
            let retry = started + self.timing.retransmit * 2 + self.timing.backoff * self.rank(None);
            if now >= retry {
                self.start_election(&mut out, now);
            }
        } else {
            let deadline = self.last_leader + self.timing.suspicion + self.timing.backoff * self.rank(self.leader);
            if self.election_at.is_some_and(|t| now >= t) || now >= deadline {
                self.start_election(&mut out, now);
            }
        }
        out
    }

    fn leader_tick(&mut self, out: &mut Out, now: SimTime, ballot: Ballot) {
        self.broadcast(out, &Body::Heartbeat { ballot, chosen_upto: self.d.applied });
        let retransmit = self.timing.retransmit;
        let resend = match &mut self.role {
            Role::Leader { inflight: Some(f), .. } if now >= f.sent + retransmit => {
                f.sent = now;
                Some((f.slot, f.acks.clone()))
            }
            _ => None,
        };
        if let Some((slot, acks)) = resend {
            let cmd = self.d.log[&slot].cmd;
            for &m in self.d.config.members.keys() {
                if !acks.contains(&m) && m != self.d.me {
                    self.send(out, m, Body::Accept { ballot, slot, cmd });
                }
            }
        }
        let members: Vec<_> = self.d.config.members.keys().copied().filter(|&m| m != self.d.me).collect();
        for m in members {
            let last = self.last_ack.get(&m).copied().unwrap_or(now);
            if now >= last + self.timing.suspicion && !self.control_pending.contains(&m) {
                self.suspect(m, now);
            }
            let missing = !self.d.view.contains_key(&m);
            let stale = self.joining.get(&m).is_none_or(|&t| now >= t + self.timing.retransmit * 10);
            if missing && stale {
                self.joining.insert(m, now);
                out.push(Output::Effect(Effect::Join { member: m, rack: self.d.config.members[&m] }));
            }
        }
        self.propose_next(out, now);
    }

    /// Announces this replica to every peer and the client; a leader also
    /// re-sends whatever it had in flight.
    pub fn resume(&mut self, now: SimTime) -> Out {
        let mut out = Vec::new();
        let hello = Body::Hello { view: self.view_list(), reply: true };
        self.broadcast(&mut out, &hello);
        if let Some(c) = self.d.client {
            self.send_pid(&mut out, c, Body::Hello { view: self.view_list(), reply: false });
        }
        if let Role::Leader { ballot, .. } = self.role {
            self.broadcast(&mut out, &Body::Heartbeat { ballot, chosen_upto: self.d.applied });
            self.propose_next(&mut out, now);
        }
        out
    }

    /// Makes this replica a new incarnation of itself running as `pid`.
    pub fn reincarnated(&mut self, pid: ProcessId) {
        self.d.incarnation += 1;
        self.d.view.insert(self.d.me, Peer { pid, incarnation: self.d.incarnation });
        self.dirty_meta = true;
    }

    fn view_list(&self) -> Vec<(MemberId, ProcessId, u32)> {
        self.d.view.iter().map(|(&m, p)| (m, p.pid, p.incarnation)).collect()
    }

    // ----- proposer --------------------------------------------------------

    pub fn campaign(&mut self, now: SimTime) -> Out {
        let mut out = Vec::new();
        if self.is_member() {
            self.start_election(&mut out, now);
        }
        out
    }

    fn start_election(&mut self, out: &mut Out, now: SimTime) {
        if !self.is_member() {
            return;
        }
        let round = self.d.promised.round.max(self.max_round) + 1;
        let ballot = Ballot { round, proposer: self.d.me };
        self.set_promised(ballot);
        let from = self.d.applied;
        let mine = self.d.log.range(from..).map(|(&s, e)| (s, *e)).collect();
        self.role = Role::Candidate { ballot, from, promises: BTreeMap::from([(self.d.me, mine)]), started: now };
        self.leader = None;
        self.election_at = None;
        self.broadcast(out, &Body::Prepare { ballot, from });
        self.maybe_lead(out, now);
    }

    fn maybe_lead(&mut self, out: &mut Out, now: SimTime) {
        let Role::Candidate { promises, .. } = &self.role else { return };
        let n = promises.keys().filter(|m| self.d.config.contains(**m)).count();
        if n < self.d.config.quorum() {
            return;
        }
        let Role::Candidate { ballot, promises, .. } = std::mem::replace(&mut self.role, Role::Follower) else {
            unreachable!()
        };
        let epoch = self.d.config.epoch;
        let mut best: BTreeMap<u32, Entry> = BTreeMap::new();
        let mut chosen: BTreeMap<u32, Command> = BTreeMap::new();
        for (slot, e) in promises.into_values().flatten() {
            if e.status == Status::Chosen {
                chosen.insert(slot, e.cmd);
            } else if best.get(&slot).is_none_or(|b| e.ballot > b.ballot) {
                best.insert(slot, e);
            }
        }
        for (slot, cmd) in chosen {
            self.mark_chosen(slot, cmd);
        }
        // the role is parked as follower so a configuration change here
        // does not trigger a second election from inside apply
        self.apply(out, now);
        if self.d.config.epoch != epoch {
            self.start_election(out, now);
            return;
        }
        if let Some(&top) = best.keys().next_back() {
            for slot in self.d.applied..=top {
                if self.d.log.get(&slot).is_some_and(|e| e.status == Status::Chosen) {
                    continue;
                }
                let cmd = best.get(&slot).map_or(Command::Noop, |e| e.cmd);
                self.put(slot, Entry { status: Status::Accepted, ballot, cmd });
                // later slots belong to a configuration phase 1 did not cover
                if matches!(cmd, Command::Reconfigure { .. }) {
                    break;
                }
            }
        }
        self.d.lead = ballot;
        self.dirty_meta = true;
        self.role = Role::Leader { ballot, inflight: None };
        self.leader = Some(self.d.me);
        self.election_at = None;
        for &m in self.d.config.members.keys() {
            let t = self.last_ack.entry(m).or_insert(now);
            *t = (*t).max(now);
        }
        for c in std::mem::take(&mut self.buffer) {
            self.enqueue(c);
        }
        // failures already announced need no timeout
        let failed: Vec<_> = self.memory_failed.iter().copied().filter(|m| self.d.config.contains(*m)).collect();
        for m in failed {
            self.control_pending.remove(&m);
            self.suspect(m, now);
        }
        self.broadcast(out, &Body::Heartbeat { ballot, chosen_upto: self.d.applied });
        self.propose_next(out, now);
    }

    fn suspect(&mut self, m: MemberId, now: SimTime) {
        if !self.d.config.contains(m) || self.control_pending.contains(&m) {
            return;
        }
        let reincarnate = self.strategy == Strategy::Reincarnate && !self.memory_failed.contains(&m);
        let cmd = match self.d.view.get(&m) {
            Some(p) if reincarnate => Command::Reincarnate { member: m, incarnation: p.incarnation },
            _ => Command::Reconfigure { remove: m, rack: self.placement(m) },
        };
        self.queue.push_front(cmd);
        self.control_pending.insert(m);
        self.last_ack.insert(m, now);
    }

    /// Rack for the member replacing `m`: its own unless that rack is
    /// known dead, else the first free one.
    fn placement(&self, m: MemberId) -> RackId {
        let own = self.d.config.members[&m];
        if !self.dead_racks.contains(&own) {
            return own;
        }
        let used: BTreeSet<RackId> = self.d.config.members.values().copied().collect();
        self.racks
            .iter()
            .copied()
            .find(|r| !used.contains(r) && !self.dead_racks.contains(r))
            .unwrap_or(own)
    }

    fn propose_next(&mut self, out: &mut Out, now: SimTime) {
        let Role::Leader { ballot, inflight: None } = self.role else { return };
        let slot = self.d.applied;
        if slot >= LOG_CAPACITY {
            return;
        }
        let cmd = match self.d.log.get(&slot) {
            Some(e) if e.status == Status::Accepted && e.ballot == ballot => e.cmd,
            _ => {
                let next = loop {
                    match self.queue.pop_front() {
                        None => return,
                        Some(c) if c.client_id().is_some_and(|id| self.chosen_ids.contains(&id)) => continue,
                        Some(c) => break c,
                    }
                };
                self.put(slot, Entry { status: Status::Accepted, ballot, cmd: next });
                next
            }
        };
        let acks: BTreeSet<_> = if self.is_member() { BTreeSet::from([self.d.me]) } else { BTreeSet::new() };
        let done = acks.len() >= self.d.config.quorum();
        self.role = Role::Leader { ballot, inflight: Some(Inflight { slot, acks, sent: now }) };
        self.broadcast(out, &Body::Accept { ballot, slot, cmd });
        if done {
            self.on_chosen(out, now, slot);
        }
    }

    fn on_chosen(&mut self, out: &mut Out, now: SimTime, slot: u32) {
        let cmd = self.d.log[&slot].cmd;
        self.mark_chosen(slot, cmd);
        if let Role::Leader { inflight, .. } = &mut self.role {
            *inflight = None;
        }
        self.broadcast(out, &Body::Chosen { slot, cmd });
        self.apply(out, now);
        self.propose_next(out, now);
    }

    // ----- learner ---------------------------------------------------------

    fn mark_chosen(&mut self, slot: u32, cmd: Command) {
        if slot < self.d.applied || slot >= LOG_CAPACITY {
            return;
        }
        let ballot = self.d.log.get(&slot).map_or(Ballot::ZERO, |e| e.ballot);
        if self.d.log.get(&slot).is_some_and(|e| e.status == Status::Chosen) {
            return;
        }
        self.put(slot, Entry { status: Status::Chosen, ballot, cmd });
        if let Some(id) = cmd.client_id() {
            self.chosen_ids.insert(id);
        }
    }

    fn learn(&mut self, out: &mut Out, from: ProcessId, slot: u32, cmd: Command) {
        self.mark_chosen(slot, cmd);
        let gap = slot > self.d.applied && !self.d.log.get(&self.d.applied).is_some_and(|e| e.status == Status::Chosen);
        if gap {
            self.send_pid(out, from, Body::CatchupRequest { from: self.d.applied });
        }
    }

    fn apply(&mut self, out: &mut Out, now: SimTime) {
        let epoch = self.d.config.epoch;
        while let Some(e) = self.d.log.get(&self.d.applied).filter(|e| e.status == Status::Chosen) {
            let slot = self.d.applied;
            let cmd = e.cmd;
            match cmd {
                Command::Noop => {}
                Command::Client { id, .. } => {
                    self.buffer.retain(|c| c.client_id() != Some(id));
                    self.queue.retain(|c| c.client_id() != Some(id));
                }
                Command::Reconfigure { remove, rack } => self.apply_reconfigure(out, remove, rack, now),
                Command::Reincarnate { member, incarnation } => {
                    self.control_pending.remove(&member);
                    self.last_ack.insert(member, now);
                    let target = self.d.view.get(&member).filter(|p| p.incarnation == incarnation);
                    if let (true, Some(p), Some(&rack)) = (self.is_leader(), target, self.d.config.members.get(&member)) {
                        out.push(Output::Effect(Effect::Reincarnate { member, dead: p.pid, rack }));
                    }
                }
            }
            self.d.applied += 1;
            self.dirty_meta = true;
            out.push(Output::Applied { slot, cmd, epoch: self.d.config.epoch });
        }
        if self.d.config.epoch != epoch && self.ballot().is_some() {
            self.start_election(out, now);
        }
    }

    fn apply_reconfigure(&mut self, out: &mut Out, remove: MemberId, rack: RackId, now: SimTime) {
        let c = &mut self.d.config;
        if !c.members.contains_key(&remove) || c.next_member >= MAX_MEMBERS {
            return;
        }
        let add = MemberId(c.next_member);
        c.next_member += 1;
        c.members.remove(&remove);
        c.members.insert(add, rack);
        c.epoch += 1;
        let old = self.d.view.remove(&remove);
        self.memory_failed.remove(&remove);
        self.control_pending.remove(&remove);
        self.last_ack.remove(&remove);
        self.last_ack.insert(add, now);
        if self.leader == Some(remove) {
            self.leader = None;
        }
        if self.is_leader() {
            if let Some(p) = old {
                out.push(Output::Effect(Effect::Retire { member: remove, old: p.pid }));
            }
            self.joining.insert(add, now);
            out.push(Output::Effect(Effect::Join { member: add, rack }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(n: u8) -> ProcessId {
        ProcessId::new(n)
    }

    fn group(strategy: Strategy) -> Vec<Replica> {
        let config = Config::initial(&[RackId(0), RackId(1), RackId(2)]);
        let view: BTreeMap<_, _> =
            (0..3).map(|i| (MemberId(i), Peer { pid: pid(i + 1), incarnation: 0 })).collect();
        let timing = Timing::for_cross_rack_rtt(SimTime::from_micros(45));
        (0..3).map(|i| Replica::new(MemberId(i), config.clone(), view.clone(), None, strategy, timing)).collect()
    }

    // delivers every message in FIFO order until quiet
    fn settle(rs: &mut [Replica], mut pending: Vec<(ProcessId, Output)>) -> Vec<(MemberId, u32, Command)> {
        let mut applied = Vec::new();
        while !pending.is_empty() {
            let (from, o) = pending.remove(0);
            match o {
                Output::Send { to, msg } => {
                    let i = (to.get() - 1) as usize;
                    let outs = rs[i].on_message(SimTime::ZERO, from, msg);
                    pending.extend(outs.into_iter().map(|o| (to, o)));
                }
                Output::Applied { slot, cmd, .. } => applied.push((MemberId(from.get() - 1), slot, cmd)),
                Output::Effect(_) => {}
            }
        }
        applied
    }

    #[test]
    fn one_command_is_chosen_everywhere() {
        let mut rs = group(Strategy::Reincarnate);
        let outs = rs[0].campaign(SimTime::ZERO);
        let mut pending: Vec<_> = outs.into_iter().map(|o| (pid(1), o)).collect();
        settle(&mut rs, std::mem::take(&mut pending));
        assert!(rs[0].is_leader());
        let cmd = Command::Client { id: 1, value: 7 };
        pending.extend(rs[0].on_client(SimTime::ZERO, cmd).into_iter().map(|o| (pid(1), o)));
        let applied = settle(&mut rs, pending);
        for m in 0..3 {
            assert!(applied.contains(&(MemberId(m), 0, cmd)), "{applied:?}");
        }
    }

    #[test]
    fn leader_resumes_after_restore() {
        let mut rs = group(Strategy::Reincarnate);
        let outs = rs[0].campaign(SimTime::ZERO);
        settle(&mut rs, outs.into_iter().map(|o| (pid(1), o)).collect());
        let d = rs[0].durable().clone();
        let r = Replica::restore(d, Strategy::Reincarnate, rs[0].timing, SimTime::ZERO);
        assert!(r.is_leader());
        // a promise to someone else since then means following
        let mut d = rs[0].durable().clone();
        d.promised = Ballot { round: 9, proposer: MemberId(1) };
        assert!(!Replica::restore(d, Strategy::Reincarnate, rs[0].timing, SimTime::ZERO).is_leader());
    }

    #[test]
    fn stale_epoch_messages_are_ignored() {
        let mut rs = group(Strategy::Transfer);
        rs[1].d.config.epoch = 1;
        let msg = PeerMsg {
            header: Header { member: MemberId(0), incarnation: 0, epoch: 0 },
            body: Body::Accept { ballot: Ballot { round: 5, proposer: MemberId(0) }, slot: 0, cmd: Command::Noop },
        };
        let before = rs[1].durable().clone();
        let outs = rs[1].on_message(SimTime::ZERO, pid(1), msg);
        assert!(outs.is_empty());
        assert_eq!(rs[1].durable(), &before);
    }

    #[test]
    fn suspicion_proposes_by_strategy() {
        for (strategy, want_reincarnate) in [(Strategy::Reincarnate, true), (Strategy::Transfer, false)] {
            let mut rs = group(strategy);
            let outs = rs[0].campaign(SimTime::ZERO);
            settle(&mut rs, outs.into_iter().map(|o| (pid(1), o)).collect());
            let t = SimTime::from_micros(200);
            let outs = rs[0].on_tick(t);
            let accept = outs.iter().find_map(|o| match o {
                Output::Send { msg: PeerMsg { body: Body::Accept { cmd, .. }, .. }, .. } => Some(*cmd),
                _ => None,
            });
            match accept {
                Some(Command::Reincarnate { .. }) => assert!(want_reincarnate),
                Some(Command::Reconfigure { .. }) => assert!(!want_reincarnate),
                other => panic!("unexpected proposal {other:?}"),
            }
        }
    }
}

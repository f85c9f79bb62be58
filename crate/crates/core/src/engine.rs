//! Deterministic discrete-event engine.
//!
//! Events are ordered by `(fire_at, ordinal)`; the ordinal is assigned at
//! scheduling time, so events due at the same instant fire in FIFO order.
//! The only randomness is the seeded jitter source, so two engines built
//! from the same configuration and seed replay identically.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::addr::{ComputeId, MemId, ProcessId, RackId};
use crate::latency::{LatencyModel, LinkClass};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

/// Anything that can be the target of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActorId {
    Mmu(RackId),
    Memory(MemId),
    Compute(ComputeId),
    Monitor(RackId),
    Tor,
    Process(ProcessId),
    /// Free-standing actors used by tests and drivers.
    Named(u32),
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Mmu(r) => write!(f, "mmu{}", r.0),
            ActorId::Memory(m) => write!(f, "mem{}", m.0),
            ActorId::Compute(c) => write!(f, "ce{}", c.0),
            ActorId::Monitor(r) => write!(f, "mon{}", r.0),
            ActorId::Tor => f.write_str("tor"),
            ActorId::Process(p) => write!(f, "p{}", p.get()),
            ActorId::Named(n) => write!(f, "actor{n}"),
        }
    }
}

impl Serialize for ActorId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

/// How far in the future an event fires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    /// Fires at the current time.
    Immediate,
    /// One-way trip over a link: half the round trip, plus jitter.
    Link(LinkClass),
    /// A local timer.
    After(SimTime),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown target {0}")]
    UnknownTarget(ActorId),
    #[error("simulation halted")]
    Halted,
    #[error("event scheduled in the past: {at} < now {now}")]
    Causality { at: SimTime, now: SimTime },
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub id: EventId,
    pub fire_at: SimTime,
    pub target: ActorId,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.id).cmp(&(self.0.fire_at, self.0.id))
    }
}

pub struct Engine<P> {
    now: SimTime,
    next_id: u64,
    queue: BinaryHeap<Queued<P>>,
    actors: BTreeSet<ActorId>,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    trace: SimTrace,
    halted: bool,
    // last delivery time per ordered (from, to) channel
    channels: BTreeMap<(ActorId, ActorId), SimTime>,
    dispatched: u64,
}

impl<P> Engine<P> {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Engine {
            now: SimTime::ZERO,
            next_id: 0,
            queue: BinaryHeap::new(),
            actors: BTreeSet::new(),
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: SimTrace::default(),
            halted: false,
            channels: BTreeMap::new(),
            dispatched: 0,
        }
    }

    pub fn add_actor(&mut self, actor: ActorId) {
        self.actors.insert(actor);
    }

    pub fn has_actor(&self, actor: ActorId) -> bool {
        self.actors.contains(&actor)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn rtt(&self, link: LinkClass) -> SimTime {
        self.latency.rtt(link)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> SimTrace {
        std::mem::take(&mut self.trace)
    }

    pub fn record(&mut self, actor: ActorId, event: TraceEvent) {
        self.trace.push(self.now, actor, event);
    }

    /// Delay for a delivery, drawing jitter from the seeded source when it
    /// is enabled.
    pub fn delay(&mut self, delivery: Delivery) -> SimTime {
        match delivery {
            Delivery::Immediate => SimTime::ZERO,
            Delivery::After(d) => d,
            Delivery::Link(link) => {
                let base = self.latency.one_way(link);
                if self.latency.jitter_fraction > 0.0 {
                    let max = (base.as_nanos() as f64 * self.latency.jitter_fraction) as u64;
                    let extra = if max == 0 { 0 } else { self.rng.gen_range(0..=max) };
                    base + SimTime::from_nanos(extra)
                } else {
                    base
                }
            }
        }
    }

    pub fn schedule(
        &mut self,
        target: ActorId,
        payload: P,
        delivery: Delivery,
    ) -> Result<EventId, SimError> {
        let delay = self.delay(delivery);
        let at = self.now + delay;
        self.schedule_at(target, payload, at)
    }

    /// Schedules over an ordered channel: a message never overtakes an
    /// earlier one sent from `from` to `target`, even under jitter. Returns
    /// the arrival time.
    pub fn schedule_fifo(
        &mut self,
        from: ActorId,
        target: ActorId,
        payload: P,
        link: LinkClass,
    ) -> Result<SimTime, SimError> {
        self.schedule_fifo_from(self.now, SimTime::ZERO, from, target, payload, link)
    }

    /// Like [`Engine::schedule_fifo`] with the send happening at `depart`
    /// (a process that is still busy sends when it finishes) and arrival
    /// held back to no earlier than `not_before`.
    pub fn schedule_fifo_from(
        &mut self,
        depart: SimTime,
        not_before: SimTime,
        from: ActorId,
        target: ActorId,
        payload: P,
        link: LinkClass,
    ) -> Result<SimTime, SimError> {
        let depart = depart.max(self.now);
        let mut at = (depart + self.delay(Delivery::Link(link))).max(not_before);
        let last = self.channels.entry((from, target)).or_insert(SimTime::ZERO);
        at = at.max(*last);
        *last = at;
        self.schedule_at(target, payload, at)?;
        Ok(at)
    }

    pub fn schedule_at(
        &mut self,
        target: ActorId,
        payload: P,
        at: SimTime,
    ) -> Result<EventId, SimError> {
        if self.halted {
            return Err(SimError::Halted);
        }
        if !self.actors.contains(&target) {
            return Err(SimError::UnknownTarget(target));
        }
        if at < self.now {
            return Err(SimError::Causality { at, now: self.now });
        }
        let id = EventId(self.next_id);
        self.next_id += 1;
        self.queue.push(Queued(Event { id, fire_at: at, target, payload }));
        Ok(id)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|q| q.0.fire_at)
    }

    /// Dequeues the next event due at or before `stop`, advancing the clock.
    pub fn pop_until(&mut self, stop: SimTime) -> Option<Event<P>> {
        if self.halted {
            return None;
        }
        match self.queue.peek() {
            Some(q) if q.0.fire_at <= stop => {
                let Queued(ev) = self.queue.pop().expect("peeked");
                debug_assert!(ev.fire_at >= self.now);
                self.now = ev.fire_at;
                self.dispatched += 1;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Moves the clock forward to `t` once the queue holds nothing earlier.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now && self.peek_time().is_none_or(|next| next >= t) {
            self.now = t;
        }
    }

    /// Runs `handler` on every event in order until the clock would pass
    /// `stop`, then leaves the clock at `stop`.
    pub fn run_until<F>(&mut self, stop: SimTime, mut handler: F) -> &SimTrace
    where
        F: FnMut(&mut Engine<P>, Event<P>),
    {
        while let Some(ev) = self.pop_until(stop) {
            handler(self, ev);
        }
        if !self.halted {
            self.advance_to(stop);
        }
        &self.trace
    }

    /// Runs until `done` returns true after an event, the queue drains, or
    /// the clock would pass `limit`.
    pub fn run_while<F, D>(&mut self, limit: SimTime, mut done: D, mut handler: F) -> &SimTrace
    where
        F: FnMut(&mut Engine<P>, Event<P>),
        D: FnMut(&Engine<P>) -> bool,
    {
        while let Some(ev) = self.pop_until(limit) {
            handler(self, ev);
            if done(self) {
                break;
            }
        }
        &self.trace
    }
}

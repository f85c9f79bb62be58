//! Exhaustive exploration of a 3-replica group with two concurrent
//! proposers. Links are FIFO per sender and receiver, as in the rack
//! network; any channel may deliver next. The exhaustive search covers
//! the two proposers alone; random schedules add further elections.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};

use ddc_sim::addr::{ProcessId, RackId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ddc_sim::paxos::core::{Output, Peer};
use ddc_sim::paxos::types::{Command, Config, MemberId, PeerMsg, Status};
use ddc_sim::paxos::{Replica, Strategy, Timing};
use ddc_sim::time::SimTime;


#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    rs: Vec<Replica>,
    channels: BTreeMap<(ProcessId, ProcessId), VecDeque<PeerMsg>>,
    applied: BTreeMap<u32, Command>,
    elections: u8,
}

fn pid(i: usize) -> ProcessId {
    ProcessId::new(i as u8 + 1)
}

fn index(p: ProcessId) -> usize {
    (p.get() - 1) as usize
}

struct Explorer {
    // 128-bit fingerprints keep the visited set small
    seen: HashSet<(u64, u64)>,
    violations: Vec<String>,
    max_elections: u8,
    both_chosen: usize,
}

impl Explorer {
    fn absorb(&mut self, s: &mut State, from: ProcessId, outs: Vec<Output>) {
        for o in outs {
            match o {
                Output::Send { to, msg } => s.channels.entry((from, to)).or_default().push_back(msg),
                Output::Applied { slot, cmd, .. } => match s.applied.get(&slot) {
                    Some(&c) if c != cmd => {
                        self.violations.push(format!("slot {slot}: {c} then {cmd} at {from}"));
                    }
                    Some(_) => {}
                    None => {
                        s.applied.insert(slot, cmd);
                    }
                },
                Output::Effect(_) => {}
            }
        }
    }

    fn check(&mut self, s: &State) {
        for slot in 0..4u32 {
            let chosen: Vec<Command> = s
                .rs
                .iter()
                .filter_map(|r| r.durable().log.get(&slot))
                .filter(|e| e.status == Status::Chosen)
                .map(|e| e.cmd)
                .collect();
            if chosen.windows(2).any(|w| w[0] != w[1]) {
                self.violations.push(format!("slot {slot} chosen as {chosen:?}"));
            }
        }
        let clients = s.applied.values().filter(|c| c.client_id().is_some()).count();
        if clients == 2 {
            self.both_chosen += 1;
        }
    }

    fn successors(&mut self, s: &State) -> Vec<State> {
        let mut next = Vec::new();
        for &(from, to) in s.channels.keys() {
            let mut n = s.clone();
            let q = n.channels.get_mut(&(from, to)).unwrap();
            let msg = q.pop_front().unwrap();
            if q.is_empty() {
                n.channels.remove(&(from, to));
            }
            let outs = n.rs[index(to)].on_message(SimTime::ZERO, from, msg);
            self.absorb(&mut n, to, outs);
            next.push(n);
        }
        if s.elections < self.max_elections {
            for r in 0..s.rs.len() {
                let mut n = s.clone();
                n.elections += 1;
                let outs = n.rs[r].campaign(SimTime::ZERO);
                self.absorb(&mut n, pid(r), outs);
                next.push(n);
            }
        }
        next
    }

    fn explore(&mut self, start: State) {
        let mut stack = vec![start];
        while let Some(s) = stack.pop() {
            if !self.seen.insert(fingerprint(&s)) {
                continue;
            }
            self.check(&s);
            if !self.violations.is_empty() {
                return;
            }
            stack.extend(self.successors(&s));
        }
    }

    /// Follows one random path to quiescence.
    fn walk(&mut self, mut s: State, rng: &mut ChaCha8Rng) {
        loop {
            self.check(&s);
            if !self.violations.is_empty() {
                return;
            }
            let mut next = self.successors(&s);
            if next.is_empty() {
                return;
            }
            s = next.swap_remove(rng.gen_range(0..next.len()));
        }
    }
}

fn fingerprint(s: &State) -> (u64, u64) {
    let mut a = DefaultHasher::new();
    s.hash(&mut a);
    let mut b = DefaultHasher::new();
    0xa5a5_u16.hash(&mut b);
    s.hash(&mut b);
    (a.finish(), b.finish())
}

fn initial() -> (State, Explorer) {
    let config = Config::initial(&[RackId(0), RackId(1), RackId(2)]);
    let view: BTreeMap<_, _> = (0..3).map(|i| (MemberId(i as u8), Peer { pid: pid(i), incarnation: 0 })).collect();
    let timing = Timing::for_cross_rack_rtt(SimTime::from_micros(45));
    let rs = (0..3)
        .map(|i| Replica::new(MemberId(i as u8), config.clone(), view.clone(), None, Strategy::Transfer, timing))
        .collect();
    let mut s = State { rs, channels: BTreeMap::new(), applied: BTreeMap::new(), elections: 0 };
    let mut x = Explorer { seen: HashSet::new(), violations: Vec::new(), max_elections: 0, both_chosen: 0 };
    // two proposers, each with its own command
    for (r, id) in [(0, 1), (1, 2)] {
        let mut outs = s.rs[r].campaign(SimTime::ZERO);
        outs.extend(s.rs[r].on_client(SimTime::ZERO, Command::Client { id, value: 10 * id }));
        x.absorb(&mut s, pid(r), outs);
    }
    (s, x)
}

#[test]
fn two_concurrent_proposers_never_disagree() {
    let (s, mut x) = initial();
    x.explore(s);
    assert!(x.violations.is_empty(), "{:?}", x.violations);
    assert!(x.seen.len() > 10_000, "suspiciously small state space: {}", x.seen.len());
    assert!(x.both_chosen > 0, "exploration never reached a state with both commands chosen");
}

#[test]
fn random_schedules_with_extra_elections_never_disagree() {
    let (s, mut x) = initial();
    x.max_elections = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3000 {
        x.walk(s.clone(), &mut rng);
        assert!(x.violations.is_empty(), "{:?}", x.violations);
    }
    assert!(x.both_chosen > 0);
}

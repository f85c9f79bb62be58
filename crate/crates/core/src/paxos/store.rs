//! Replica state in a heap arena.
//!
//! Two roots: `paxos_meta` (64 bytes) and `paxos_log` (one 32-byte entry
//! per slot). All integers little-endian.
//!
//! ```text
//! meta  0      member id
//!       1      member mask (bit i set: member i in the configuration)
//!       2      next member id
//!       3      client pid (0xFF none)
//!       4..8   incarnation
//!       8..12  promised round     12  promised proposer
//!       13     lead proposer      14..16 reserved
//!       16..24 epoch
//!       24..28 applied prefix
//!       28..32 lead round
//!       32..40 rack of member i (byte i)
//!       40..48 pid of member i (0xFF none)
//!       48..64 reserved
//!
//! entry 0      status: 0 empty, 1 accepted, 2 chosen
//!       1      kind: 0 noop, 1 client, 2 reconfigure, 3 reincarnate
//!       4..8   ballot round       8  ballot proposer
//!       12..16 a   16..24 b   24..32 c
//! ```
//!
//! Client commands store id in `b` and value in `c`; reconfigure stores the
//! removed member in `a` and the rack in `b`; reincarnate stores the member
//! in `a` and the incarnation in `b`.

use std::collections::BTreeMap;

use crate::addr::{ProcessId, RackId, VirtualPage};
use crate::heap::{Arena, HeapError, PageMemory};

use super::core::{Durable, Peer, LOG_CAPACITY};
use super::types::{Ballot, Command, Config, Entry, MemberId, Status, MAX_MEMBERS};

pub const META_ROOT: &str = "paxos_meta";
pub const LOG_ROOT: &str = "paxos_log";
pub const META_LEN: usize = 64;
pub const ENTRY_LEN: usize = 32;
pub const ARENA_PAGES: usize = 8;
pub const LOG_PAGES: u32 = 2;
/// Entries written per transaction; bounds the undo log per commit.
const BATCH: usize = 32;
const NONE: u8 = 0xFF;

/// Arena offsets of the two roots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub meta: u64,
    pub log: u64,
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"))
}

fn corrupt(what: impl Into<String>) -> HeapError {
    HeapError::CorruptArena(what.into())
}

pub fn encode_meta(d: &Durable) -> [u8; META_LEN] {
    let mut b = [0u8; META_LEN];
    b[0] = d.me.0;
    b[1] = d.config.members.keys().fold(0u8, |m, id| m | 1 << id.0);
    b[2] = d.config.next_member;
    b[3] = d.client.map_or(NONE, |p| p.get());
    b[4..8].copy_from_slice(&d.incarnation.to_le_bytes());
    b[8..12].copy_from_slice(&d.promised.round.to_le_bytes());
    b[12] = d.promised.proposer.0;
    b[13] = d.lead.proposer.0;
    b[16..24].copy_from_slice(&d.config.epoch.to_le_bytes());
    b[24..28].copy_from_slice(&d.applied.to_le_bytes());
    b[28..32].copy_from_slice(&d.lead.round.to_le_bytes());
    for i in 0..MAX_MEMBERS {
        let m = MemberId(i);
        b[32 + i as usize] = d.config.members.get(&m).map_or(0, |r| r.0 as u8);
        b[40 + i as usize] = d.view.get(&m).map_or(NONE, |p| p.pid.get());
    }
    b
}

/// Everything but the log.
pub fn decode_meta(b: &[u8]) -> Result<Durable, HeapError> {
    if b.len() < META_LEN {
        return Err(corrupt("short meta block"));
    }
    let pid = |v: u8| (v != NONE).then(|| ProcessId::new(v));
    let mut members = BTreeMap::new();
    let mut view = BTreeMap::new();
    for i in 0..MAX_MEMBERS {
        if b[1] & (1 << i) != 0 {
            members.insert(MemberId(i), RackId(u16::from(b[32 + i as usize])));
        }
        if let Some(p) = pid(b[40 + i as usize]) {
            view.insert(MemberId(i), Peer { pid: p, incarnation: 0 });
        }
    }
    let me = MemberId(b[0]);
    if me.0 >= MAX_MEMBERS {
        return Err(corrupt(format!("member id {} out of range", me.0)));
    }
    let incarnation = u32_at(b, 4);
    if let Some(p) = view.get_mut(&me) {
        p.incarnation = incarnation;
    }
    Ok(Durable {
        me,
        incarnation,
        promised: Ballot { round: u32_at(b, 8), proposer: MemberId(b[12]) },
        lead: Ballot { round: u32_at(b, 28), proposer: MemberId(b[13]) },
        log: BTreeMap::new(),
        applied: u32_at(b, 24),
        config: Config { epoch: u64_at(b, 16), members, next_member: b[2] },
        view,
        client: pid(b[3]),
    })
}

pub fn encode_entry(e: &Entry) -> [u8; ENTRY_LEN] {
    let mut b = [0u8; ENTRY_LEN];
    b[0] = match e.status {
        Status::Accepted => 1,
        Status::Chosen => 2,
    };
    let (kind, a, x, y) = match e.cmd {
        Command::Noop => (0, 0, 0, 0),
        Command::Client { id, value } => (1, 0, id, value),
        Command::Reconfigure { remove, rack } => (2, u32::from(remove.0), u64::from(rack.0), 0),
        Command::Reincarnate { member, incarnation } => (3, u32::from(member.0), u64::from(incarnation), 0),
    };
    b[1] = kind;
    b[4..8].copy_from_slice(&e.ballot.round.to_le_bytes());
    b[8] = e.ballot.proposer.0;
    b[12..16].copy_from_slice(&a.to_le_bytes());
    b[16..24].copy_from_slice(&x.to_le_bytes());
    b[24..32].copy_from_slice(&y.to_le_bytes());
    b
}

pub fn decode_entry(b: &[u8]) -> Result<Option<Entry>, HeapError> {
    let status = match b[0] {
        0 => return Ok(None),
        1 => Status::Accepted,
        2 => Status::Chosen,
        s => return Err(corrupt(format!("bad entry status {s}"))),
    };
    let a = u32_at(b, 12);
    let x = u64_at(b, 16);
    let small = |v: u64| u8::try_from(v).map_err(|_| corrupt("entry field out of range"));
    let cmd = match b[1] {
        0 => Command::Noop,
        1 => Command::Client { id: x, value: u64_at(b, 24) },
        2 => Command::Reconfigure { remove: MemberId(small(u64::from(a))?), rack: RackId(small(x)?.into()) },
        3 => Command::Reincarnate {
            member: MemberId(small(u64::from(a))?),
            incarnation: u32::try_from(x).map_err(|_| corrupt("incarnation out of range"))?,
        },
        k => return Err(corrupt(format!("bad command kind {k}"))),
    };
    Ok(Some(Entry { status, ballot: Ballot { round: u32_at(b, 4), proposer: MemberId(b[8]) }, cmd }))
}

/// Formats a fresh arena over `pages` and allocates both roots.
pub fn format<M: PageMemory>(mem: &mut M, pages: Vec<VirtualPage>) -> Result<(Arena, Layout), HeapError> {
    let mut arena = Arena::format(mem, pages, LOG_PAGES)?;
    let log_len = LOG_CAPACITY as u64 * ENTRY_LEN as u64;
    let (meta, log) = arena.transaction(mem, |a, m| {
        let meta = a.alloc(m, META_LEN as u64)?;
        let log = a.alloc(m, log_len)?;
        a.set_root(m, META_ROOT, meta)?;
        a.set_root(m, LOG_ROOT, log)?;
        Ok((meta, log))
    })?;
    let layout = Layout { meta: arena.offset_of(meta)?, log: arena.offset_of(log)? };
    Ok((arena, layout))
}

/// Recovers an arena and finds the roots.
pub fn open<M: PageMemory>(mem: &mut M, pages: Vec<VirtualPage>) -> Result<(Arena, Layout), HeapError> {
    let arena = Arena::recover(mem, pages)?;
    let meta = arena.get_root(mem, META_ROOT)?;
    let log = arena.get_root(mem, LOG_ROOT)?;
    let layout = Layout { meta: arena.offset_of(meta)?, log: arena.offset_of(log)? };
    Ok((arena, layout))
}

pub fn load<M: PageMemory>(mem: &mut M, arena: &Arena, layout: Layout) -> Result<Durable, HeapError> {
    let meta = arena.read_at(mem, layout.meta, META_LEN)?;
    let mut d = decode_meta(&meta)?;
    let raw = arena.read_at(mem, layout.log, LOG_CAPACITY as usize * ENTRY_LEN)?;
    for (slot, chunk) in raw.chunks(ENTRY_LEN).enumerate() {
        if let Some(e) = decode_entry(chunk)? {
            d.log.insert(slot as u32, e);
        }
    }
    Ok(d)
}

/// Writes the given slots and, if `meta`, the meta block, in transactions
/// of bounded size. The meta block goes in the last one, so a durable
/// applied prefix or lead ballot never runs ahead of the log.
pub fn persist<M: PageMemory>(
    mem: &mut M,
    arena: &mut Arena,
    layout: Layout,
    d: &Durable,
    meta: bool,
    slots: &[u32],
) -> Result<(), HeapError> {
    let mut batches: Vec<&[u32]> = slots.chunks(BATCH).collect();
    if batches.is_empty() {
        if !meta {
            return Ok(());
        }
        batches.push(&[]);
    }
    let last = batches.len() - 1;
    for (i, batch) in batches.into_iter().enumerate() {
        arena.transaction(mem, |a, m| {
            for &slot in batch {
                let bytes = d.log.get(&slot).map_or([0u8; ENTRY_LEN], encode_entry);
                a.write_at(m, layout.log + u64::from(slot) * ENTRY_LEN as u64, &bytes)?;
            }
            if meta && i == last {
                a.write_at(m, layout.meta, &encode_meta(d))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::VecMemory;

    fn durable() -> Durable {
        let mut d = Durable {
            me: MemberId(1),
            incarnation: 3,
            promised: Ballot { round: 7, proposer: MemberId(2) },
            lead: Ballot { round: 5, proposer: MemberId(1) },
            log: BTreeMap::new(),
            applied: 2,
            config: Config::initial(&[RackId(0), RackId(1), RackId(2)]),
            view: BTreeMap::new(),
            client: Some(ProcessId::new(9)),
        };
        d.config.epoch = 4;
        d.view.insert(MemberId(1), Peer { pid: ProcessId::new(5), incarnation: 3 });
        d.view.insert(MemberId(0), Peer { pid: ProcessId::new(2), incarnation: 0 });
        let b = Ballot { round: 5, proposer: MemberId(1) };
        d.log.insert(0, Entry { status: Status::Chosen, ballot: b, cmd: Command::Client { id: 1, value: 10 } });
        d.log.insert(
            1,
            Entry { status: Status::Chosen, ballot: b, cmd: Command::Reconfigure { remove: MemberId(2), rack: RackId(2) } },
        );
        d.log.insert(
            2,
            Entry { status: Status::Accepted, ballot: b, cmd: Command::Reincarnate { member: MemberId(0), incarnation: 4 } },
        );
        d
    }

    fn pages() -> Vec<VirtualPage> {
        (0..ARENA_PAGES as u64).map(|i| VirtualPage::new(ProcessId::new(1), 10 + i).unwrap()).collect()
    }

    #[test]
    fn round_trip_through_arena() {
        let d = durable();
        let mut mem = VecMemory::new();
        let (mut arena, layout) = format(&mut mem, pages()).unwrap();
        let slots: Vec<u32> = d.log.keys().copied().collect();
        persist(&mut mem, &mut arena, layout, &d, true, &slots).unwrap();
        let (arena2, layout2) = open(&mut mem, pages()).unwrap();
        assert_eq!(layout, layout2);
        let back = load(&mut mem, &arena2, layout2).unwrap();
        assert_eq!(back.log, d.log);
        assert_eq!(back.config, d.config);
        assert_eq!(back.promised, d.promised);
        assert_eq!(back.lead, d.lead);
        assert_eq!(back.applied, d.applied);
        assert_eq!(back.client, d.client);
        assert_eq!(back.view[&MemberId(1)], d.view[&MemberId(1)]);
        assert_eq!(back.view[&MemberId(0)].pid, ProcessId::new(2));
    }

    #[test]
    fn entry_bytes_follow_the_layout() {
        let e = Entry {
            status: Status::Accepted,
            ballot: Ballot { round: 0x0102, proposer: MemberId(3) },
            cmd: Command::Client { id: 5, value: 6 },
        };
        let b = encode_entry(&e);
        assert_eq!(b[0], 1);
        assert_eq!(b[1], 1);
        assert_eq!(&b[4..8], &[2, 1, 0, 0]);
        assert_eq!(b[8], 3);
        assert_eq!(u64_at(&b, 16), 5);
        assert_eq!(u64_at(&b, 24), 6);
        assert_eq!(decode_entry(&b).unwrap(), Some(e));
        assert_eq!(decode_entry(&[0; ENTRY_LEN]).unwrap(), None);
    }

    #[test]
    fn full_log_persists_in_batches() {
        let mut d = durable();
        for s in 0..LOG_CAPACITY {
            d.log.insert(s, Entry { status: Status::Chosen, ballot: Ballot::ZERO, cmd: Command::Noop });
        }
        let mut mem = VecMemory::new();
        let (mut arena, layout) = format(&mut mem, pages()).unwrap();
        let slots: Vec<u32> = d.log.keys().copied().collect();
        persist(&mut mem, &mut arena, layout, &d, true, &slots).unwrap();
        let back = load(&mut mem, &arena, layout).unwrap();
        assert_eq!(back.log.len(), LOG_CAPACITY as usize);
    }
}

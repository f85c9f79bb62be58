use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{ProcessId, RackId, VirtualPage};

/// Highest member id a configuration can hold (exclusive).
pub const MAX_MEMBERS: u8 = 8;

/// Stable identity of a replica across reincarnations. A reincarnated
/// process keeps its member id; a replacement added by reconfiguration
/// gets a fresh one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct MemberId(pub u8);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Ordered by round, then proposer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Ballot {
    pub round: u32,
    pub proposer: MemberId,
}

impl Ballot {
    pub const ZERO: Ballot = Ballot { round: 0, proposer: MemberId(0) };
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.round, self.proposer.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Command {
    Noop,
    Client { id: u64, value: u64 },
    /// Replace `remove` with a fresh member placed on `rack`. The new
    /// member's id is assigned when the command is applied.
    Reconfigure { remove: MemberId, rack: RackId },
    /// Restart `member` from its own memory; only acted on while the
    /// member is still at `incarnation`.
    Reincarnate { member: MemberId, incarnation: u32 },
}

impl Command {
    pub fn client_id(&self) -> Option<u64> {
        match self {
            Command::Client { id, .. } => Some(*id),
            _ => None,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Noop => f.write_str("noop"),
            Command::Client { id, value } => write!(f, "client({id},{value})"),
            Command::Reconfigure { remove, rack } => write!(f, "reconfigure(-{remove},{rack})"),
            Command::Reincarnate { member, incarnation } => write!(f, "reincarnate({member},{incarnation})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Config {
    pub epoch: u64,
    pub members: BTreeMap<MemberId, RackId>,
    /// Id the next added member receives.
    pub next_member: u8,
}

impl Config {
    pub fn initial(racks: &[RackId]) -> Config {
        let members: BTreeMap<_, _> = racks.iter().enumerate().map(|(i, &r)| (MemberId(i as u8), r)).collect();
        Config { epoch: 0, next_member: members.len() as u8, members }
    }

    pub fn quorum(&self) -> usize {
        self.members.len() / 2 + 1
    }

    pub fn contains(&self, m: MemberId) -> bool {
        self.members.contains_key(&m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Accepted,
    Chosen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Entry {
    pub status: Status,
    pub ballot: Ballot,
    pub cmd: Command,
}

/// Sender identity carried by every peer message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Header {
    pub member: MemberId,
    pub incarnation: u32,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Body {
    Prepare { ballot: Ballot, from: u32 },
    Promise { ballot: Ballot, entries: Vec<(u32, Entry)>, pending: Vec<Command> },
    Accept { ballot: Ballot, slot: u32, cmd: Command },
    Accepted { ballot: Ballot, slot: u32 },
    Nack { ballot: Ballot, promised: Ballot },
    Chosen { slot: u32, cmd: Command },
    Heartbeat { ballot: Ballot, chosen_upto: u32 },
    HeartbeatAck { ballot: Ballot },
    Forward { cmds: Vec<Command> },
    CatchupRequest { from: u32 },
    Catchup { entries: Vec<(u32, Command)> },
    /// Announces the sender's view of who is where. `reply` asks the
    /// receiver to answer with its own view.
    Hello { view: Vec<(MemberId, ProcessId, u32)>, reply: bool },
}

impl Body {
    pub fn name(&self) -> &'static str {
        match self {
            Body::Prepare { .. } => "prepare",
            Body::Promise { .. } => "promise",
            Body::Accept { .. } => "accept",
            Body::Accepted { .. } => "accepted",
            Body::Nack { .. } => "nack",
            Body::Chosen { .. } => "chosen",
            Body::Heartbeat { .. } => "heartbeat",
            Body::HeartbeatAck { .. } => "heartbeat-ack",
            Body::Forward { .. } => "forward",
            Body::CatchupRequest { .. } => "catchup-request",
            Body::Catchup { .. } => "catchup",
            Body::Hello { .. } => "hello",
        }
    }
}

// wire-size estimates used for link accounting
impl Body {
    pub fn wire_bytes(&self) -> u64 {
        let entries = match self {
            Body::Promise { entries, pending, .. } => entries.len() + pending.len(),
            Body::Catchup { entries } => entries.len(),
            Body::Forward { cmds } => cmds.len(),
            Body::Hello { view, .. } => view.len(),
            _ => 0,
        };
        64 + 32 * entries as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerMsg {
    pub header: Header,
    pub body: Body,
}

/// Everything carried between Paxos processes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wire {
    Peer(PeerMsg),
    Client(Command),
    /// Whole-arena image pushed to a member added by reconfiguration.
    Snapshot { member: MemberId, image: Vec<u8>, pages: Vec<VirtualPage> },
}

impl Wire {
    pub fn wire_bytes(&self) -> u64 {
        match self {
            Wire::Peer(m) => m.body.wire_bytes(),
            Wire::Client(_) => 64,
            Wire::Snapshot { image, pages, .. } => image.len() as u64 + 8 * pages.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Restart a failed replica from its own memory.
    Reincarnate,
    /// Replace a failed replica with a new member fed a state snapshot.
    Transfer,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reincarnate" => Ok(Strategy::Reincarnate),
            "transfer" => Ok(Strategy::Transfer),
            _ => Err(format!("unknown recovery strategy {s:?} (expected reincarnate or transfer)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ballots_order_by_round_then_proposer() {
        let a = Ballot { round: 1, proposer: MemberId(2) };
        let b = Ballot { round: 2, proposer: MemberId(0) };
        let c = Ballot { round: 2, proposer: MemberId(1) };
        assert!(a < b && b < c);
        assert!(Ballot::ZERO < a);
    }

    #[test]
    fn quorum_is_majority() {
        let c = Config::initial(&[RackId(0), RackId(1), RackId(2)]);
        assert_eq!(c.quorum(), 2);
        assert_eq!(c.next_member, 3);
    }
}

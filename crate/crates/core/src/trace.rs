//! The simulation trace: every observable event with its timestamp and the
//! actor it happened at. Acceptance checks are written against this record,
//! and it serializes as one JSON object per line.

use std::io::{self, Write};

use serde::Serialize;

use crate::addr::{AccessKind, ComputeId, FrameId, MemId, Perms, ProcessId, VirtualAddress, VirtualPage};
use crate::engine::ActorId;
use crate::latency::LinkClass;
use crate::memory::{FailureMode, Fault};
use crate::os::{FailureDescriptor, SignalKind};
use crate::rack::Origin;
use crate::time::SimTime;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Note {
        text: String,
    },

    MmuAllocate {
        pid: ProcessId,
        pages: Vec<VirtualPage>,
        frames: Vec<FrameId>,
    },
    MmuGrant {
        src: ProcessId,
        dst: ProcessId,
        pages: Vec<VirtualPage>,
        frames: Vec<FrameId>,
    },
    MmuSteal {
        caller: ProcessId,
        src: ProcessId,
        pages: Vec<VirtualPage>,
        frames: Vec<FrameId>,
    },
    MmuRevoke {
        pid: ProcessId,
        pages: Vec<VirtualPage>,
    },
    MmuGroup {
        group: u32,
        members: Vec<ProcessId>,
    },
    MmuProvision {
        pid: ProcessId,
        compute: ComputeId,
        successor_of: Option<ProcessId>,
    },
    MmuReject {
        pid: ProcessId,
        op: &'static str,
        error: String,
    },

    SetEntry {
        pid: ProcessId,
        page: VirtualPage,
        frame: FrameId,
        perms: Perms,
    },
    ClearEntry {
        pid: ProcessId,
        page: VirtualPage,
        frame: Option<FrameId>,
    },
    Access {
        pid: ProcessId,
        addr: VirtualAddress,
        op: AccessKind,
        len: usize,
        fault: Option<Fault>,
    },
    AccessIgnored {
        pid: ProcessId,
        addr: VirtualAddress,
    },
    ElementFailed {
        element: MemId,
        mode: FailureMode,
    },

    Syscall {
        pid: ProcessId,
        call: &'static str,
        outcome: String,
    },
    Signal {
        pid: ProcessId,
        signal: SignalKind,
        handled: bool,
    },
    AccessTimeout {
        pid: ProcessId,
        addr: VirtualAddress,
    },
    Invalidate {
        pid: ProcessId,
        pages: Vec<VirtualPage>,
    },
    ProcessStart {
        pid: ProcessId,
        compute: ComputeId,
        origin: Origin,
    },
    ProcessExit {
        pid: ProcessId,
        cause: String,
    },
    ComputeCrash {
        compute: ComputeId,
    },
    ComputeStall {
        compute: ComputeId,
        until: SimTime,
    },
    ComputeResume {
        compute: ComputeId,
    },
    Notice {
        from: ProcessId,
        to: ProcessId,
        seq: u64,
        failure: FailureDescriptor,
    },

    Detect {
        compute: ComputeId,
        last_seen: SimTime,
    },
    HandlerRegistered {
        pid: ProcessId,
    },
    HandlerRun {
        pid: ProcessId,
        steps: usize,
    },
    MonitorFailed,

    NetSend {
        from: ProcessId,
        to: ProcessId,
        link: LinkClass,
        bytes: u64,
    },
    NetDeliver {
        from: ProcessId,
        to: ProcessId,
        bytes: u64,
    },
    NetDrop {
        from: ProcessId,
        to: ProcessId,
        reason: &'static str,
    },
    Fence {
        compute: ComputeId,
    },

    App {
        app: &'static str,
        event: &'static str,
        fields: serde_json::Value,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Note { .. } => "note",
            TraceEvent::MmuAllocate { .. } => "mmu_allocate",
            TraceEvent::MmuGrant { .. } => "mmu_grant",
            TraceEvent::MmuSteal { .. } => "mmu_steal",
            TraceEvent::MmuRevoke { .. } => "mmu_revoke",
            TraceEvent::MmuGroup { .. } => "mmu_group",
            TraceEvent::MmuProvision { .. } => "mmu_provision",
            TraceEvent::MmuReject { .. } => "mmu_reject",
            TraceEvent::SetEntry { .. } => "set_entry",
            TraceEvent::ClearEntry { .. } => "clear_entry",
            TraceEvent::Access { .. } => "access",
            TraceEvent::AccessIgnored { .. } => "access_ignored",
            TraceEvent::ElementFailed { .. } => "element_failed",
            TraceEvent::Syscall { .. } => "syscall",
            TraceEvent::Signal { .. } => "signal",
            TraceEvent::AccessTimeout { .. } => "access_timeout",
            TraceEvent::Invalidate { .. } => "invalidate",
            TraceEvent::ProcessStart { .. } => "process_start",
            TraceEvent::ProcessExit { .. } => "process_exit",
            TraceEvent::ComputeCrash { .. } => "compute_crash",
            TraceEvent::ComputeStall { .. } => "compute_stall",
            TraceEvent::ComputeResume { .. } => "compute_resume",
            TraceEvent::Notice { .. } => "notice",
            TraceEvent::Detect { .. } => "detect",
            TraceEvent::HandlerRegistered { .. } => "handler_registered",
            TraceEvent::HandlerRun { .. } => "handler_run",
            TraceEvent::MonitorFailed => "monitor_failed",
            TraceEvent::NetSend { .. } => "net_send",
            TraceEvent::NetDeliver { .. } => "net_deliver",
            TraceEvent::NetDrop { .. } => "net_drop",
            TraceEvent::Fence { .. } => "fence",
            TraceEvent::App { .. } => "app",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub t: SimTime,
    pub actor: ActorId,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default)]
pub struct SimTrace {
    records: Vec<TraceRecord>,
}

impl SimTrace {
    pub fn push(&mut self, t: SimTime, actor: ActorId, event: TraceEvent) {
        debug_assert!(self.records.last().is_none_or(|r| r.t <= t));
        self.records.push(TraceRecord { t, actor, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.event.kind() == kind)
    }

    pub fn app_events<'a>(
        &'a self,
        app: &'a str,
        event: &'a str,
    ) -> impl Iterator<Item = (SimTime, &'a serde_json::Value)> + 'a {
        self.records.iter().filter_map(move |r| match &r.event {
            TraceEvent::App { app: a, event: e, fields } if *a == app && *e == event => {
                Some((r.t, fields))
            }
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::RackId;

    #[test]
    fn records_are_flat_json_lines() {
        let mut trace = SimTrace::default();
        trace.push(
            SimTime::from_nanos(1_500),
            ActorId::Mmu(RackId(0)),
            TraceEvent::MmuRevoke { pid: ProcessId::new(3), pages: vec![] },
        );
        trace.push(SimTime::from_micros(2), ActorId::Tor, TraceEvent::MonitorFailed);
        let text = trace.to_jsonl();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], r#"{"t":1.5,"actor":"mmu0","kind":"mmu_revoke","pid":3,"pages":[]}"#);
        assert_eq!(lines[1], r#"{"t":2.0,"actor":"tor","kind":"monitor_failed"}"#);
    }

    #[test]
    fn kind_matches_serialized_tag() {
        let ev = TraceEvent::Fence { compute: ComputeId(4) };
        let v = serde_json::to_value(TraceRecord { t: SimTime::ZERO, actor: ActorId::Tor, event: ev.clone() })
            .unwrap();
        assert_eq!(v["kind"], ev.kind());
    }
}

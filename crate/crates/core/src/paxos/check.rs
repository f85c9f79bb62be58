//! Safety checks and recovery metrics computed from a finished trace.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::addr::{AccessKind, ComputeId, ProcessId};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

/// One replica applying one slot, with the time its state was durable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Apply {
    pub done: SimTime,
    pub member: u64,
    pub slot: u64,
    pub cmd: String,
    pub epoch: u64,
}

pub fn applies(trace: &SimTrace) -> Vec<Apply> {
    trace
        .app_events("paxos", "apply")
        .map(|(t, f)| Apply {
            done: f["done_ns"].as_u64().map(SimTime::from_nanos).unwrap_or(t).max(t),
            member: f["member"].as_u64().unwrap_or(0),
            slot: f["slot"].as_u64().unwrap_or(0),
            cmd: f["cmd"].as_str().unwrap_or_default().to_string(),
            epoch: f["epoch"].as_u64().unwrap_or(0),
        })
        .collect()
}

/// Slots for which two replicas applied different commands.
pub fn agreement_violations(trace: &SimTrace) -> Vec<String> {
    let mut first: BTreeMap<u64, Apply> = BTreeMap::new();
    let mut out = Vec::new();
    for a in applies(trace) {
        match first.get(&a.slot) {
            Some(b) if b.cmd != a.cmd => out.push(format!(
                "slot {}: m{} applied {} but m{} applied {}",
                a.slot, b.member, b.cmd, a.member, a.cmd
            )),
            Some(_) => {}
            None => {
                first.insert(a.slot, a);
            }
        }
    }
    out
}

/// Writes or deliveries attributed to a process on a compute element after
/// that element was fenced.
pub fn post_fence_mutations(trace: &SimTrace) -> Vec<String> {
    let mut home: BTreeMap<ProcessId, ComputeId> = BTreeMap::new();
    let mut fenced: BTreeMap<ComputeId, SimTime> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        let after_fence = |pid: &ProcessId| {
            home.get(pid).and_then(|c| fenced.get(c)).is_some_and(|&f| r.t > f)
        };
        match &r.event {
            TraceEvent::ProcessStart { pid, compute, .. } => {
                home.insert(*pid, *compute);
            }
            TraceEvent::Fence { compute } => {
                fenced.entry(*compute).or_insert(r.t);
            }
            TraceEvent::Access { pid, op: AccessKind::Write, fault: None, addr, .. } if after_fence(pid) => {
                out.push(format!("{}: write by fenced {pid} at {addr}", r.t));
            }
            TraceEvent::NetDeliver { from, to, .. } if after_fence(from) => {
                out.push(format!("{}: message from fenced {from} delivered to {to}", r.t));
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    /// From the failure to the first client command chosen after it.
    pub time_to_next_chosen: Option<SimTime>,
    /// From the failure to a replacement or restarted replica being live.
    pub time_to_full_health: Option<SimTime>,
    pub snapshot_bytes: u64,
    pub client_commands_chosen: usize,
    pub final_epoch: u64,
    pub agreement_violations: usize,
    pub post_fence_mutations: usize,
}

/// Earliest durable apply per slot, with the command chosen there.
pub fn chosen_times(trace: &SimTrace) -> BTreeMap<u64, (SimTime, String)> {
    let mut out: BTreeMap<u64, (SimTime, String)> = BTreeMap::new();
    for a in applies(trace) {
        let e = out.entry(a.slot).or_insert((a.done, a.cmd.clone()));
        if a.done < e.0 {
            e.0 = a.done;
        }
    }
    out
}

pub fn recovery_metrics(trace: &SimTrace, failure_at: SimTime) -> RecoveryMetrics {
    let chosen = chosen_times(trace);
    let time_to_next_chosen = chosen
        .values()
        .filter(|(t, cmd)| *t > failure_at && cmd.starts_with("client"))
        .map(|(t, _)| *t - failure_at)
        .min();
    let time_to_full_health = ["resumed", "installed"]
        .iter()
        .flat_map(|ev| trace.app_events("paxos", ev))
        .filter(|(t, _)| *t > failure_at)
        .map(|(t, f)| f["done_ns"].as_u64().map(SimTime::from_nanos).unwrap_or(t).max(t) - failure_at)
        .min();
    let snapshot_bytes = trace.app_events("paxos", "snapshot").filter_map(|(_, f)| f["bytes"].as_u64()).sum();
    let final_epoch = applies(trace).iter().map(|a| a.epoch).max().unwrap_or(0);
    RecoveryMetrics {
        time_to_next_chosen,
        time_to_full_health,
        snapshot_bytes,
        client_commands_chosen: chosen.values().filter(|(_, c)| c.starts_with("client")).count(),
        final_epoch,
        agreement_violations: agreement_violations(trace).len(),
        post_fence_mutations: post_fence_mutations(trace).len(),
    }
}

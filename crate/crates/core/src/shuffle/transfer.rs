//! A map/reduce shuffle on one rack. Every mapper holds one partition per
//! reducer in pooled memory and hands it over either by copying it through
//! the network or by granting the pages.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::addr::{ProcessId, VirtualPage, PAGE_SIZE};
use crate::latency::LinkClass;
use crate::memory::AccessOp;
use crate::os::{Signal, SignalKind};
use crate::rack::{App, AppEvent, Origin, Rack, RackConfig, ReqId, SysReply};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

/// Role tag offset for reducers.
pub const REDUCER_ROLE: u64 = 1000;

const TRANSFER: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Read the partition, send it over the ToR, the reducer writes it
    /// into its own pages and acknowledges.
    Transparent,
    /// Hand the pages over with one Rack MMU grant.
    Grant,
}

impl TransferMode {
    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Transparent => "transparent",
            TransferMode::Grant => "grant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleParams {
    pub mappers: u16,
    pub reducers: u16,
    pub pages_per_partition: usize,
    pub mode: TransferMode,
    pub map_time: SimTime,
    pub seed: u64,
}

impl Default for ShuffleParams {
    fn default() -> Self {
        ShuffleParams {
            mappers: 4,
            reducers: 4,
            pages_per_partition: 1,
            mode: TransferMode::Transparent,
            map_time: SimTime::from_micros(10),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ShuffleMsg {
    Data { mapper: u16, bytes: Vec<u8> },
    Ack { reducer: u16 },
}

struct Edge {
    start: SimTime,
    reads: BTreeMap<u64, usize>,
    buf: Vec<u8>,
}

struct Mapper {
    index: u16,
    pages: Vec<VirtualPage>,
    edges: BTreeMap<u16, Edge>,
    grants: BTreeMap<ReqId, u16>,
}

struct Inbound {
    writes: BTreeMap<u64, usize>,
}

struct Reducer {
    index: u16,
    dest: Vec<VirtualPage>,
    inbound: BTreeMap<u16, Inbound>,
    received: BTreeMap<u16, Vec<VirtualPage>>,
    reduced: bool,
}

enum Node {
    Mapper(Mapper),
    Reducer(Reducer),
}

pub struct ShuffleJob {
    params: ShuffleParams,
    mappers: Vec<ProcessId>,
    reducers: Vec<ProcessId>,
    nodes: BTreeMap<ProcessId, Node>,
}

/// Deterministic contents of one partition.
pub fn partition_data(seed: u64, mapper: u16, reducer: u16, pages: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(mapper) << 32) ^ (u64::from(reducer) << 16));
    let mut out = vec![0u8; pages * PAGE_SIZE];
    rng.fill_bytes(&mut out);
    out
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ShuffleJob {
    fn partition(&self, m: &Mapper, r: u16) -> Vec<VirtualPage> {
        let pp = self.params.pages_per_partition;
        m.pages[r as usize * pp..(r as usize + 1) * pp].to_vec()
    }

    fn mapper_index(&self, pid: ProcessId) -> Option<u16> {
        self.mappers.iter().position(|&p| p == pid).map(|i| i as u16)
    }

    fn start_mapper(&self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, index: u16) -> Option<Mapper> {
        let pp = self.params.pages_per_partition;
        let pages = rack.alloc_now(pid, pp * self.params.reducers as usize, false).ok()?;
        for r in 0..self.params.reducers {
            let data = partition_data(self.params.seed, index, r, pp);
            for (k, page) in pages[r as usize * pp..(r as usize + 1) * pp].iter().enumerate() {
                let chunk = data[k * PAGE_SIZE..(k + 1) * PAGE_SIZE].to_vec();
                rack.access_now(pid, page.base(), AccessOp::Write { data: chunk }).ok()?;
            }
            rack.app_event(pid, "shuffle", "produced", json!({ "mapper": index, "reducer": r, "digest": digest(&data) }));
        }
        let _ = rack.set_timer(pid, self.params.map_time, TRANSFER);
        Some(Mapper { index, pages, edges: BTreeMap::new(), grants: BTreeMap::new() })
    }

    fn start_reducer(&self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, index: u16) -> Option<Reducer> {
        let _ = rack.sys_set_handler(pid, SignalKind::PageAdded, true);
        let dest = match self.params.mode {
            TransferMode::Transparent => {
                let n = self.params.pages_per_partition * self.params.mappers as usize;
                rack.alloc_now(pid, n, false).ok()?
            }
            TransferMode::Grant => Vec::new(),
        };
        Some(Reducer { index, dest, inbound: BTreeMap::new(), received: BTreeMap::new(), reduced: false })
    }

    fn edge_done(&self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, mapper: u16, reducer: u16, start: SimTime, rtts: u32) {
        let done = rack.now();
        let tor_bytes = match self.params.mode {
            TransferMode::Transparent => (self.params.pages_per_partition * PAGE_SIZE) as u64,
            TransferMode::Grant => 0,
        };
        rack.app_event(
            pid,
            "shuffle",
            "edge",
            json!({
                "mode": self.params.mode.name(),
                "mapper": mapper,
                "reducer": reducer,
                "start_ns": start.as_nanos(),
                "done_ns": done.as_nanos(),
                "round_trips": rtts,
                "tor_bytes": tor_bytes,
            }),
        );
    }

    fn mapper_event(&mut self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, m: &mut Mapper, ev: AppEvent<ShuffleMsg>) {
        match ev {
            AppEvent::Timer { token: TRANSFER } => {
                for r in 0..self.params.reducers {
                    let start = rack.busy_until(pid);
                    let pages = self.partition(m, r);
                    match self.params.mode {
                        TransferMode::Transparent => {
                            let mut reads = BTreeMap::new();
                            for (k, page) in pages.iter().enumerate() {
                                if let Ok(t) = rack.access(pid, page.base(), AccessOp::Read { len: PAGE_SIZE }) {
                                    reads.insert(t, k);
                                }
                            }
                            let buf = vec![0u8; pages.len() * PAGE_SIZE];
                            m.edges.insert(r, Edge { start, reads, buf });
                        }
                        TransferMode::Grant => {
                            if let Ok(req) = rack.sys_grant(pid, pages, self.reducers[r as usize]) {
                                m.grants.insert(req, r);
                                m.edges.insert(r, Edge { start, reads: BTreeMap::new(), buf: Vec::new() });
                            }
                        }
                    }
                }
            }
            AppEvent::AccessDone { token, result: Ok(bytes) } => {
                let Some((&r, e)) = m.edges.iter_mut().find(|(_, e)| e.reads.contains_key(&token)) else { return };
                let k = e.reads.remove(&token).expect("found above");
                e.buf[k * PAGE_SIZE..(k + 1) * PAGE_SIZE].copy_from_slice(&bytes);
                if e.reads.is_empty() {
                    let bytes = std::mem::take(&mut e.buf);
                    let len = bytes.len() as u64;
                    let _ = rack.send(pid, self.reducers[r as usize], ShuffleMsg::Data { mapper: m.index, bytes }, len);
                }
            }
            AppEvent::Net { msg: ShuffleMsg::Ack { reducer }, .. } => {
                if let Some(e) = m.edges.remove(&reducer) {
                    self.edge_done(rack, pid, m.index, reducer, e.start, 3);
                }
            }
            AppEvent::SyscallDone { req, result: Ok(SysReply::Granted(_)) } => {
                if let Some(r) = m.grants.remove(&req) {
                    if let Some(e) = m.edges.remove(&r) {
                        self.edge_done(rack, pid, m.index, r, e.start, 1);
                    }
                }
            }
            _ => {}
        }
    }

    fn reducer_event(&mut self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, r: &mut Reducer, ev: AppEvent<ShuffleMsg>) {
        match ev {
            AppEvent::Net { from, msg: ShuffleMsg::Data { mapper, bytes } } => {
                let pp = self.params.pages_per_partition;
                let mut writes = BTreeMap::new();
                for k in 0..pp {
                    let page = r.dest[mapper as usize * pp + k];
                    let data = bytes[k * PAGE_SIZE..(k + 1) * PAGE_SIZE].to_vec();
                    if let Ok(t) = rack.access(pid, page.base(), AccessOp::Write { data }) {
                        writes.insert(t, k);
                    }
                }
                debug_assert_eq!(Some(mapper), self.mapper_index(from));
                r.inbound.insert(mapper, Inbound { writes });
            }
            AppEvent::AccessDone { token, result: Ok(_) } => {
                let Some((&m, inb)) = r.inbound.iter_mut().find(|(_, i)| i.writes.contains_key(&token)) else { return };
                inb.writes.remove(&token);
                if inb.writes.is_empty() {
                    r.inbound.remove(&m);
                    let pp = self.params.pages_per_partition;
                    r.received.insert(m, r.dest[m as usize * pp..(m as usize + 1) * pp].to_vec());
                    let _ = rack.send(pid, self.mappers[m as usize], ShuffleMsg::Ack { reducer: r.index }, 64);
                }
            }
            AppEvent::Signal(Signal::PageAdded { pages }) => {
                let mut by: BTreeMap<u16, Vec<VirtualPage>> = BTreeMap::new();
                for p in pages {
                    if let Some(m) = self.mapper_index(p.pid()) {
                        by.entry(m).or_default().push(p);
                    }
                }
                for (m, mut ps) in by {
                    ps.sort_by_key(|p| p.number());
                    r.received.insert(m, ps);
                }
            }
            _ => {}
        }
        if !r.reduced && r.received.len() == self.params.mappers as usize {
            r.reduced = true;
            self.reduce(rack, pid, r);
        }
    }

    fn reduce(&self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, r: &Reducer) {
        for (&m, pages) in &r.received {
            let mut bytes = Vec::with_capacity(pages.len() * PAGE_SIZE);
            for page in pages {
                match rack.access_now(pid, page.base(), AccessOp::Read { len: PAGE_SIZE }) {
                    Ok(b) => bytes.extend_from_slice(&b),
                    Err(_) => return,
                }
            }
            rack.app_event(pid, "shuffle", "checksum", json!({ "mapper": m, "reducer": r.index, "digest": digest(&bytes) }));
        }
        let done = rack.busy_until(pid).as_nanos();
        rack.app_event(pid, "shuffle", "reduce-done", json!({ "reducer": r.index, "done_ns": done }));
    }
}

impl App<ShuffleMsg> for ShuffleJob {
    fn on_event(&mut self, rack: &mut Rack<ShuffleMsg>, pid: ProcessId, ev: AppEvent<ShuffleMsg>) {
        let node = match (self.nodes.remove(&pid), ev) {
            (None, AppEvent::Started { origin: Origin::Initial { role } }) => {
                let node = if role >= REDUCER_ROLE {
                    self.start_reducer(rack, pid, (role - REDUCER_ROLE) as u16).map(Node::Reducer)
                } else {
                    self.start_mapper(rack, pid, role as u16).map(Node::Mapper)
                };
                match node {
                    Some(n) => n,
                    None => {
                        rack.exit(pid, "shuffle task failed to start");
                        return;
                    }
                }
            }
            (None, _) => return,
            (Some(Node::Mapper(mut m)), ev) => {
                self.mapper_event(rack, pid, &mut m, ev);
                Node::Mapper(m)
            }
            (Some(Node::Reducer(mut r)), ev) => {
                self.reducer_event(rack, pid, &mut r, ev);
                Node::Reducer(r)
            }
        };
        self.nodes.insert(pid, node);
    }
}

/// A shuffle job deployed on rack 0: mapper `i` on compute `i`, reducer
/// `j` on compute `mappers + j`.
pub struct ShuffleRun {
    pub rack: Rack<ShuffleMsg>,
    pub job: ShuffleJob,
}

impl ShuffleRun {
    pub fn new(config: RackConfig, params: ShuffleParams) -> Result<ShuffleRun, String> {
        if params.mappers == 0 || params.reducers == 0 || params.pages_per_partition == 0 {
            return Err("mappers, reducers and pages_per_partition must be positive".into());
        }
        let tasks = params.mappers + params.reducers;
        if config.computes_per_rack < tasks {
            return Err(format!("{tasks} shuffle tasks need {tasks} compute elements in rack 0"));
        }
        let mut rack = Rack::new(config.clone())?;
        let mut mappers = Vec::new();
        for i in 0..params.mappers {
            let pid = rack.spawn(config.compute(0, i), Origin::Initial { role: u64::from(i) }).map_err(|e| e.to_string())?;
            mappers.push(pid);
        }
        let mut reducers = Vec::new();
        for j in 0..params.reducers {
            let origin = Origin::Initial { role: REDUCER_ROLE + u64::from(j) };
            let pid = rack.spawn(config.compute(0, params.mappers + j), origin).map_err(|e| e.to_string())?;
            reducers.push(pid);
        }
        Ok(ShuffleRun { rack, job: ShuffleJob { params, mappers, reducers, nodes: BTreeMap::new() } })
    }

    /// Runs until every reducer is done or `limit` passes.
    pub fn run(&mut self, limit: SimTime) -> TransferReport {
        let p = &self.job.params;
        let (reducers, edges) = (p.reducers as usize, p.reducers as usize * p.mappers as usize);
        self.rack.run_while(&mut self.job, limit, |r| {
            let t = r.trace();
            t.app_events("shuffle", "reduce-done").count() >= reducers && t.app_events("shuffle", "edge").count() >= edges
        });
        transfer_report(self.rack.trace(), self.rack.rtt(LinkClass::RackMmuInterconnect))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeMetrics {
    pub mapper: u16,
    pub reducer: u16,
    pub start: SimTime,
    pub done: SimTime,
    pub round_trips: u32,
    pub tor_bytes: u64,
}

impl EdgeMetrics {
    pub fn elapsed(&self) -> SimTime {
        self.done - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub mode: Option<TransferMode>,
    pub edges: Vec<EdgeMetrics>,
    /// Longest edge, from issue to completion at the mapper.
    pub transfer_time: SimTime,
    /// Sum of per-edge round trips.
    pub round_trips: u64,
    /// Edge time measured in interconnect round trips, if uniform.
    pub measured_round_trips: Option<u64>,
    /// Partition bytes that crossed the ToR.
    pub tor_bytes: u64,
    /// Every message on the ToR, as seen in the trace.
    pub tor_messages: u64,
    pub job_time: Option<SimTime>,
    pub reducers_done: usize,
    /// Every reducer's digest matches what its mapper produced.
    pub checksums_match: bool,
}

pub fn transfer_report(trace: &SimTrace, rtt: SimTime) -> TransferReport {
    let u16_of = |v: &serde_json::Value| v.as_u64().unwrap_or(0) as u16;
    let edges: Vec<EdgeMetrics> = trace
        .app_events("shuffle", "edge")
        .map(|(_, f)| EdgeMetrics {
            mapper: u16_of(&f["mapper"]),
            reducer: u16_of(&f["reducer"]),
            start: SimTime::from_nanos(f["start_ns"].as_u64().unwrap_or(0)),
            done: SimTime::from_nanos(f["done_ns"].as_u64().unwrap_or(0)),
            round_trips: f["round_trips"].as_u64().unwrap_or(0) as u32,
            tor_bytes: f["tor_bytes"].as_u64().unwrap_or(0),
        })
        .collect();
    let mode = trace.app_events("shuffle", "edge").find_map(|(_, f)| match f["mode"].as_str()? {
        "grant" => Some(TransferMode::Grant),
        "transparent" => Some(TransferMode::Transparent),
        _ => None,
    });
    let mut per_rtt: Vec<u64> = edges
        .iter()
        .map(|e| if rtt == SimTime::ZERO { 0 } else { e.elapsed().as_nanos() / rtt.as_nanos() })
        .collect();
    per_rtt.dedup();
    let produced: BTreeMap<(u64, u64), String> = trace
        .app_events("shuffle", "produced")
        .map(|(_, f)| ((f["mapper"].as_u64().unwrap_or(0), f["reducer"].as_u64().unwrap_or(0)), f["digest"].to_string()))
        .collect();
    let consumed: BTreeMap<(u64, u64), String> = trace
        .app_events("shuffle", "checksum")
        .map(|(_, f)| ((f["mapper"].as_u64().unwrap_or(0), f["reducer"].as_u64().unwrap_or(0)), f["digest"].to_string()))
        .collect();
    let done: Vec<SimTime> = trace
        .app_events("shuffle", "reduce-done")
        .map(|(t, f)| f["done_ns"].as_u64().map(SimTime::from_nanos).unwrap_or(t))
        .collect();
    TransferReport {
        mode,
        transfer_time: edges.iter().map(EdgeMetrics::elapsed).max().unwrap_or(SimTime::ZERO),
        round_trips: edges.iter().map(|e| u64::from(e.round_trips)).sum(),
        measured_round_trips: (per_rtt.len() == 1).then(|| per_rtt[0]),
        tor_bytes: edges.iter().map(|e| e.tor_bytes).sum(),
        tor_messages: trace.iter().filter(|r| matches!(r.event, TraceEvent::NetSend { .. })).count() as u64,
        job_time: (!done.is_empty()).then(|| done.iter().copied().max().expect("non-empty")),
        reducers_done: done.len(),
        checksums_match: !produced.is_empty() && produced == consumed,
        edges,
    }
}

/// Transparent transfer time over grant transfer time.
pub fn speedup(transparent: &TransferReport, grant: &TransferReport) -> Option<f64> {
    if grant.transfer_time == SimTime::ZERO {
        return None;
    }
    Some(transparent.transfer_time.as_nanos() as f64 / grant.transfer_time.as_nanos() as f64)
}

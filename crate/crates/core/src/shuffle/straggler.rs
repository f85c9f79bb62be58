//! Straggler mitigation. Each task commits its progress to a crash-consistent
//! heap after every unit of work. An orchestrator watches completion times
//! and, when a task lags, either steals the task's memory into a fresh
//! process that continues where it stopped, or restarts it from scratch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::addr::{ComputeId, ProcessId, VirtualPage};
use crate::heap::{Arena, HeapError, RackMemory};
use crate::monitor::{FastFailureHandler, HandlerStep};
use crate::os::{Signal, SignalKind};
use crate::rack::{App, AppEvent, Origin, Rack, RackConfig, ReqId, SysReply};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

/// Role tag of the orchestrator.
pub const ORCHESTRATOR_ROLE: u64 = 1000;

const UNIT: u64 = 1;
const CHECK: u64 = 2;
const ARENA_PAGES: usize = 4;
const LOG_PAGES: u32 = 2;
const PROGRESS: &str = "progress";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mitigation {
    /// Reincarnate the task from its own memory on a spare compute.
    Steal,
    /// Start the task over on a spare compute and revoke the old one.
    Restart,
    None,
}

impl Mitigation {
    pub fn name(self) -> &'static str {
        match self {
            Mitigation::Steal => "steal",
            Mitigation::Restart => "restart",
            Mitigation::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StragglerParams {
    pub tasks: u16,
    pub units: u32,
    pub unit_time: SimTime,
    /// Task whose compute element runs `slowdown` times slower.
    pub straggler: Option<u16>,
    pub slowdown: u32,
    /// A task lags once it runs longer than `slack` times the median
    /// completion time.
    pub slack: f64,
    pub check_interval: SimTime,
    pub mitigation: Mitigation,
    pub spares: u16,
}

impl Default for StragglerParams {
    fn default() -> Self {
        StragglerParams {
            tasks: 4,
            units: 20,
            unit_time: SimTime::from_micros(10),
            straggler: Some(0),
            slowdown: 8,
            slack: 2.0,
            check_interval: SimTime::from_micros(20),
            mitigation: Mitigation::Steal,
            spares: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TaskMsg {
    Done { task: u16, acc: u64 },
}

struct Worker {
    task: u16,
    arena: Arena,
    progress: u64,
    done: u32,
    acc: u64,
}

#[derive(Default)]
struct Orchestrator {
    finished: BTreeMap<u16, SimTime>,
    mitigated: BTreeSet<u16>,
    timed_out: BTreeSet<u16>,
    limit: Option<SimTime>,
    ops: BTreeMap<ReqId, u16>,
}

enum Node {
    Worker(Worker),
    Orchestrator(Orchestrator),
    Gone,
}

pub struct StragglerJob {
    params: StragglerParams,
    orchestrator: ProcessId,
    slow: Option<ComputeId>,
    spares: Vec<ComputeId>,
    current: BTreeMap<u16, ProcessId>,
    task_of: BTreeMap<ProcessId, u16>,
    nodes: BTreeMap<ProcessId, Node>,
}

fn mix(acc: u64, unit: u32) -> u64 {
    (acc ^ u64::from(unit)).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

fn encode(done: u32, acc: u64) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&u64::from(done).to_le_bytes());
    b[8..].copy_from_slice(&acc.to_le_bytes());
    b
}

impl StragglerJob {
    fn format(rack: &mut Rack<TaskMsg>, pid: ProcessId, task: u16) -> Result<Worker, HeapError> {
        let pages = rack.alloc_now(pid, ARENA_PAGES, true).map_err(|e| HeapError::CorruptArena(e.to_string()))?;
        let mut mem = RackMemory::new(rack, pid);
        let mut arena = Arena::format(&mut mem, pages, LOG_PAGES)?;
        let at = arena.transaction(&mut mem, |a, m| {
            let at = a.alloc(m, 16)?;
            a.write(m, at, &encode(0, 0))?;
            a.set_root(m, PROGRESS, at)?;
            Ok(at)
        })?;
        let progress = arena.offset_of(at)?;
        Ok(Worker { task, arena, progress, done: 0, acc: 0 })
    }

    fn recover(rack: &mut Rack<TaskMsg>, pid: ProcessId, task: u16, pages: Vec<VirtualPage>) -> Result<Worker, HeapError> {
        let mut mem = RackMemory::new(rack, pid);
        let arena = Arena::recover(&mut mem, pages)?;
        let at = arena.get_root(&mut mem, PROGRESS)?;
        let b = arena.read(&mut mem, at, 16)?;
        let done = u64::from_le_bytes(b[..8].try_into().expect("8 bytes")) as u32;
        let acc = u64::from_le_bytes(b[8..].try_into().expect("8 bytes"));
        let progress = arena.offset_of(at)?;
        Ok(Worker { task, arena, progress, done, acc })
    }

    fn start_worker(&mut self, rack: &mut Rack<TaskMsg>, pid: ProcessId, origin: Origin) -> Node {
        let built = match origin {
            Origin::Initial { role } | Origin::Spawned { role, .. } => Self::format(rack, pid, role as u16),
            Origin::Reincarnated { of, pages } => match self.task_of.get(&of) {
                Some(&task) => Self::recover(rack, pid, task, pages),
                None => return Node::Gone,
            },
        };
        let w = match built {
            Ok(w) => w,
            Err(e) => {
                if rack.is_running(pid) {
                    rack.app_event(pid, "straggler", "worker-failed", json!({ "error": e.to_string() }));
                    rack.exit(pid, "task failed to start");
                }
                return Node::Gone;
            }
        };
        self.task_of.insert(pid, w.task);
        let steps = vec![HandlerStep::NotifyGroup { members: vec![self.orchestrator] }];
        let _ = rack.register_fast_failure_handler(pid, FastFailureHandler { steps });
        rack.app_event(pid, "straggler", "task-start", json!({ "task": w.task, "resume_at": w.done }));
        self.next_unit(rack, pid, &w);
        Node::Worker(w)
    }

    fn next_unit(&self, rack: &mut Rack<TaskMsg>, pid: ProcessId, w: &Worker) {
        if w.done >= self.params.units {
            let _ = rack.send(pid, self.orchestrator, TaskMsg::Done { task: w.task, acc: w.acc }, 64);
            rack.app_event(pid, "straggler", "task-done", json!({ "task": w.task, "acc": w.acc }));
            return;
        }
        rack.app_event(pid, "straggler", "unit-start", json!({ "task": w.task, "unit": w.done }));
        let slow = self.slow.is_some() && rack.compute_of(pid) == self.slow;
        let factor = if slow { u64::from(self.params.slowdown.max(1)) } else { 1 };
        let _ = rack.set_timer(pid, self.params.unit_time * factor, UNIT);
    }

    fn worker_event(&mut self, rack: &mut Rack<TaskMsg>, pid: ProcessId, mut w: Worker, ev: AppEvent<TaskMsg>) -> Node {
        let AppEvent::Timer { token: UNIT } = ev else { return Node::Worker(w) };
        let unit = w.done;
        let acc = mix(w.acc, unit);
        let at = w.arena.at(w.progress);
        let r = w.arena.transaction(&mut RackMemory::new(rack, pid), |a, m| a.write(m, at, &encode(unit + 1, acc)));
        if r.is_err() {
            // revoked or unreachable; an unhandled fault has ended the process
            return Node::Gone;
        }
        w.done = unit + 1;
        w.acc = acc;
        rack.app_event(pid, "straggler", "unit-done", json!({ "task": w.task, "unit": unit }));
        self.next_unit(rack, pid, &w);
        Node::Worker(w)
    }

    fn mitigate(&mut self, rack: &mut Rack<TaskMsg>, me: ProcessId, o: &mut Orchestrator, task: u16, cause: &'static str) {
        if self.params.mitigation == Mitigation::None || !o.mitigated.insert(task) {
            return;
        }
        let Some(&old) = self.current.get(&task) else { return };
        let Some(spare) = (!self.spares.is_empty()).then(|| self.spares.remove(0)) else {
            rack.app_event(me, "straggler", "no-spare", json!({ "task": task }));
            return;
        };
        let req = match self.params.mitigation {
            Mitigation::Steal => rack.sys_reincarnate(me, old, spare),
            Mitigation::Restart => {
                let req = rack.sys_spawn(me, spare, u64::from(task));
                let _ = rack.sys_revoke(me, old, None);
                req
            }
            Mitigation::None => return,
        };
        rack.app_event(
            me,
            "straggler",
            "mitigate",
            json!({ "task": task, "mode": self.params.mitigation.name(), "cause": cause, "old": old, "spare": spare }),
        );
        if let Ok(req) = req {
            o.ops.insert(req, task);
        }
    }

    /// Completion-time limit, once half the tasks have finished.
    fn limit(&self, rack: &mut Rack<TaskMsg>, me: ProcessId, o: &mut Orchestrator) -> Option<SimTime> {
        if o.limit.is_none() && o.finished.len() * 2 >= self.params.tasks as usize {
            let mut times: Vec<SimTime> = o.finished.values().copied().collect();
            times.sort();
            let median = times[times.len() / 2];
            let limit = SimTime::from_nanos((median.as_nanos() as f64 * self.params.slack).round() as u64);
            o.limit = Some(limit);
            rack.app_event(me, "straggler", "limit", json!({ "median_ns": median.as_nanos(), "limit_ns": limit.as_nanos() }));
        }
        o.limit
    }

    fn check(&mut self, rack: &mut Rack<TaskMsg>, me: ProcessId, o: &mut Orchestrator) {
        if o.finished.len() == self.params.tasks as usize {
            return;
        }
        let now = rack.now();
        if let Some(limit) = self.limit(rack, me, o).filter(|&l| now > l) {
            for task in 0..self.params.tasks {
                if o.finished.contains_key(&task) || !o.timed_out.insert(task) {
                    continue;
                }
                rack.app_event(me, "straggler", "timeout", json!({ "task": task, "limit_ns": limit.as_nanos() }));
                self.mitigate(rack, me, o, task, "timeout");
            }
        }
        let _ = rack.set_timer(me, self.params.check_interval, CHECK);
    }

    fn orchestrator_event(&mut self, rack: &mut Rack<TaskMsg>, me: ProcessId, o: &mut Orchestrator, ev: AppEvent<TaskMsg>) {
        match ev {
            AppEvent::Timer { token: CHECK } => self.check(rack, me, o),
            AppEvent::Net { msg: TaskMsg::Done { task, .. }, .. } => {
                o.finished.entry(task).or_insert(rack.now());
                self.limit(rack, me, o);
            }
            AppEvent::Signal(Signal::GroupFailureNotice { about, .. }) => {
                if let Some(&task) = self.task_of.get(&about) {
                    if self.current.get(&task) == Some(&about) && !o.finished.contains_key(&task) {
                        self.mitigate(rack, me, o, task, "notice");
                    }
                }
            }
            AppEvent::SyscallDone { req, result } => {
                let Some(task) = o.ops.remove(&req) else { return };
                match result {
                    Ok(SysReply::Reincarnated { pid, .. }) | Ok(SysReply::Spawned { pid }) => {
                        self.current.insert(task, pid);
                        self.task_of.insert(pid, task);
                        rack.app_event(me, "straggler", "relaunched", json!({ "task": task, "pid": pid }));
                    }
                    Ok(_) => {}
                    Err(e) => {
                        rack.app_event(me, "straggler", "relaunch-failed", json!({ "task": task, "error": e.to_string() }));
                    }
                }
            }
            _ => {}
        }
    }
}

impl App<TaskMsg> for StragglerJob {
    fn on_event(&mut self, rack: &mut Rack<TaskMsg>, pid: ProcessId, ev: AppEvent<TaskMsg>) {
        let node = match self.nodes.remove(&pid) {
            None => match ev {
                AppEvent::Started { origin: Origin::Initial { role: ORCHESTRATOR_ROLE } } => {
                    let _ = rack.sys_set_handler(pid, SignalKind::GroupFailureNotice, true);
                    let _ = rack.set_timer(pid, self.params.check_interval, CHECK);
                    Node::Orchestrator(Orchestrator::default())
                }
                AppEvent::Started { origin } => self.start_worker(rack, pid, origin),
                _ => return,
            },
            Some(Node::Worker(w)) => self.worker_event(rack, pid, w, ev),
            Some(Node::Orchestrator(mut o)) => {
                self.orchestrator_event(rack, pid, &mut o, ev);
                Node::Orchestrator(o)
            }
            Some(Node::Gone) => Node::Gone,
        };
        self.nodes.insert(pid, node);
    }
}

/// A job on rack 0: the orchestrator on compute 0, task `i` on compute
/// `i + 1`, spares after them.
pub struct StragglerRun {
    pub rack: Rack<TaskMsg>,
    pub job: StragglerJob,
}

impl StragglerRun {
    pub fn new(config: RackConfig, params: StragglerParams) -> Result<StragglerRun, String> {
        if params.tasks == 0 || params.units == 0 {
            return Err("tasks and units must be positive".into());
        }
        if !(params.slack.is_finite() && params.slack >= 1.0) {
            return Err(format!("slack must be at least 1, got {}", params.slack));
        }
        let need = 1 + params.tasks + params.spares;
        if config.computes_per_rack < need {
            return Err(format!("{need} compute elements needed in rack 0"));
        }
        if params.straggler.is_some_and(|s| s >= params.tasks) {
            return Err("straggler must name a task".into());
        }
        let mut rack = Rack::new(config.clone())?;
        let orchestrator =
            rack.spawn(config.compute(0, 0), Origin::Initial { role: ORCHESTRATOR_ROLE }).map_err(|e| e.to_string())?;
        let mut current = BTreeMap::new();
        let mut task_of = BTreeMap::new();
        for t in 0..params.tasks {
            let pid = rack.spawn(config.compute(0, t + 1), Origin::Initial { role: u64::from(t) }).map_err(|e| e.to_string())?;
            current.insert(t, pid);
            task_of.insert(pid, t);
        }
        let mut group = vec![orchestrator];
        group.extend(current.values().copied());
        rack.register_group(&group).map_err(|e| e.to_string())?;
        let spares = (0..params.spares).map(|i| config.compute(0, 1 + params.tasks + i)).collect();
        let slow = params.straggler.map(|s| config.compute(0, s + 1));
        let job = StragglerJob { params, orchestrator, slow, spares, current, task_of, nodes: BTreeMap::new() };
        Ok(StragglerRun { rack, job })
    }

    pub fn orchestrator(&self) -> ProcessId {
        self.job.orchestrator
    }

    /// Compute element initially running `task`.
    pub fn task_compute(&self, task: u16) -> ComputeId {
        self.rack.config().compute(0, task + 1)
    }

    /// Runs until every task has finished or `limit` passes.
    pub fn run(&mut self, limit: SimTime) -> StragglerReport {
        let want = self.job.params.tasks as usize;
        self.rack.run_while(&mut self.job, limit, |r| {
            let done: BTreeSet<u64> =
                r.trace().app_events("straggler", "task-done").filter_map(|(_, f)| f["task"].as_u64()).collect();
            done.len() >= want
        });
        straggler_report(self.rack.trace())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MitigationRecord {
    pub task: u16,
    pub cause: String,
    pub at: SimTime,
    /// Units the old process had started but not committed.
    pub in_flight: u64,
    pub relaunched_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StragglerReport {
    pub mode: Option<String>,
    pub tasks_done: usize,
    pub job_time: Option<SimTime>,
    pub units_committed: u64,
    /// Unit executions beyond the first, over all tasks.
    pub reexecuted_units: u64,
    pub in_flight_units: u64,
    pub mitigations: Vec<MitigationRecord>,
    /// When the completion-time rule first flagged each task.
    pub timeouts: BTreeMap<u16, SimTime>,
    /// Run time past which the rule flags a task, once half have finished.
    pub timeout_limit: Option<SimTime>,
    pub detections: Vec<SimTime>,
}

pub fn straggler_report(trace: &SimTrace) -> StragglerReport {
    let task = |f: &serde_json::Value| f["task"].as_u64().unwrap_or(0) as u16;
    let mut starts: BTreeMap<(u16, u64), u64> = BTreeMap::new();
    // per task: (time, unit, is_start)
    let mut history: BTreeMap<u16, Vec<(SimTime, u64, bool)>> = BTreeMap::new();
    let mut committed = BTreeSet::new();
    for (t, f) in trace.app_events("straggler", "unit-start") {
        let u = f["unit"].as_u64().unwrap_or(0);
        *starts.entry((task(f), u)).or_default() += 1;
        history.entry(task(f)).or_default().push((t, u, true));
    }
    for (t, f) in trace.app_events("straggler", "unit-done") {
        committed.insert((task(f), f["unit"].as_u64().unwrap_or(0)));
        history.entry(task(f)).or_default().push((t, f["unit"].as_u64().unwrap_or(0), false));
    }
    let relaunches: Vec<(u16, SimTime)> = trace.app_events("straggler", "relaunched").map(|(t, f)| (task(f), t)).collect();
    let mut mode = None;
    let mitigations: Vec<MitigationRecord> = trace
        .app_events("straggler", "mitigate")
        .map(|(at, f)| {
            let tk = task(f);
            mode = f["mode"].as_str().map(str::to_string);
            let h = history.get(&tk).map(Vec::as_slice).unwrap_or_default();
            let started: BTreeSet<u64> = h.iter().filter(|e| e.2 && e.0 <= at).map(|e| e.1).collect();
            let done: BTreeSet<u64> = h.iter().filter(|e| !e.2 && e.0 <= at).map(|e| e.1).collect();
            MitigationRecord {
                task: tk,
                cause: f["cause"].as_str().unwrap_or_default().to_string(),
                at,
                in_flight: started.difference(&done).count() as u64,
                relaunched_at: relaunches.iter().find(|(t, r)| *t == tk && *r >= at).map(|(_, r)| *r),
            }
        })
        .collect();
    let done_tasks: BTreeMap<u16, SimTime> = trace.app_events("straggler", "task-done").map(|(t, f)| (task(f), t)).collect();
    StragglerReport {
        mode,
        tasks_done: done_tasks.len(),
        job_time: done_tasks.values().copied().max(),
        units_committed: committed.len() as u64,
        reexecuted_units: starts.values().map(|n| n - 1).sum(),
        in_flight_units: mitigations.iter().map(|m| m.in_flight).sum(),
        timeouts: trace.app_events("straggler", "timeout").map(|(t, f)| (task(f), t)).collect(),
        timeout_limit: trace
            .app_events("straggler", "limit")
            .find_map(|(_, f)| f["limit_ns"].as_u64())
            .map(SimTime::from_nanos),
        detections: trace.iter().filter(|r| matches!(r.event, TraceEvent::Detect { .. })).map(|r| r.t).collect(),
        mitigations,
    }
}

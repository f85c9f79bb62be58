//! Rack monitor: heartbeat bookkeeping for the rack's compute elements and
//! the fast failure handlers processes leave with it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addr::{ComputeId, ProcessId, RackId};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub interval: SimTime,
    pub miss_threshold: u32,
}

impl MonitorConfig {
    /// Two interconnect round trips per beat, three misses.
    pub fn for_rtt(rack_mmu_rtt: SimTime) -> Self {
        MonitorConfig { interval: rack_mmu_rtt * 2, miss_threshold: 3 }
    }

    /// Silence longer than this declares a failure.
    pub fn deadline(&self) -> SimTime {
        self.interval * u64::from(self.miss_threshold)
    }

    /// Worst-case time from a crash to its detection.
    pub fn detection_bound(&self) -> SimTime {
        self.interval * u64::from(self.miss_threshold + 1)
    }
}

/// One control-plane step a handler may take. Handlers cannot touch
/// process memory; they can only ask the Rack MMU, the ToR and the
/// notification path to act.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum HandlerStep {
    /// Start a fresh process on a spare compute element.
    RequestProvision { compute: ComputeId },
    /// Revoke the dead process's pages and steal them to the process the
    /// preceding provision step creates.
    TriggerStealOnBehalf,
    /// Cut the dead compute element off at the ToR.
    FenceCompute,
    /// Tell these processes about the failure.
    NotifyGroup { members: Vec<ProcessId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastFailureHandler {
    pub steps: Vec<HandlerStep>,
}

impl FastFailureHandler {
    /// Steps in execution order: control-plane actions first, then the
    /// group notifications.
    pub fn ordered_steps(&self) -> impl Iterator<Item = &HandlerStep> {
        let (notify, act): (Vec<_>, Vec<_>) =
            self.steps.iter().partition(|s| matches!(s, HandlerStep::NotifyGroup { .. }));
        act.into_iter().chain(notify)
    }
}

#[derive(Debug, Clone)]
pub struct RackMonitor {
    pub rack: RackId,
    pub config: MonitorConfig,
    alive: bool,
    last_seen: BTreeMap<ComputeId, SimTime>,
    declared: BTreeSet<ComputeId>,
    handlers: BTreeMap<ProcessId, FastFailureHandler>,
}

impl RackMonitor {
    pub fn new(rack: RackId, config: MonitorConfig) -> Self {
        RackMonitor {
            rack,
            config,
            alive: true,
            last_seen: BTreeMap::new(),
            declared: BTreeSet::new(),
            handlers: BTreeMap::new(),
        }
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// The monitor is a single point of failure; once failed it detects
    /// nothing and runs no handlers.
    pub fn fail(&mut self) -> bool {
        std::mem::replace(&mut self.alive, false)
    }

    pub fn watch(&mut self, compute: ComputeId, now: SimTime) {
        self.last_seen.insert(compute, now);
    }

    pub fn last_seen(&self, compute: ComputeId) -> Option<SimTime> {
        self.last_seen.get(&compute).copied()
    }

    pub fn on_heartbeat(&mut self, compute: ComputeId, now: SimTime) {
        if self.alive && !self.declared.contains(&compute) {
            self.last_seen.insert(compute, now);
        }
    }

    /// Elements whose silence now exceeds the deadline, each declared once.
    pub fn check(&mut self, now: SimTime) -> Vec<(ComputeId, SimTime)> {
        if !self.alive {
            return Vec::new();
        }
        let deadline = self.config.deadline();
        let failed: Vec<_> = self
            .last_seen
            .iter()
            .filter(|(c, &seen)| !self.declared.contains(c) && now.saturating_sub(seen) > deadline)
            .map(|(&c, &seen)| (c, seen))
            .collect();
        for (c, _) in &failed {
            self.declared.insert(*c);
        }
        failed
    }

    /// Registering again replaces the earlier handler.
    pub fn register_handler(&mut self, pid: ProcessId, handler: FastFailureHandler) {
        self.handlers.insert(pid, handler);
    }

    pub fn has_handler(&self, pid: ProcessId) -> bool {
        self.handlers.contains_key(&pid)
    }

    /// Removes and returns the handler: each runs at most once.
    pub fn take_handler(&mut self, pid: ProcessId) -> Option<FastFailureHandler> {
        self.handlers.remove(&pid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn us(n: u64) -> SimTime {
        SimTime::from_micros(n)
    }

    #[test]
    fn detection_arithmetic() {
        // beats every 2us reach the monitor 1us later; the last one before a
        // crash at t=10 was sent at 8 and seen at 9
        let cfg = MonitorConfig { interval: us(2), miss_threshold: 3 };
        let mut m = RackMonitor::new(RackId(0), cfg);
        m.watch(ComputeId(0), SimTime::ZERO);
        for sent in (0..10).step_by(2) {
            m.on_heartbeat(ComputeId(0), us(sent + 1));
        }
        let mut detected = None;
        for check in (0..40).step_by(2) {
            if let Some(&(c, _)) = m.check(us(check)).first() {
                detected = Some((c, check));
                break;
            }
        }
        let (c, at) = detected.unwrap();
        assert_eq!(c, ComputeId(0));
        assert_eq!(at, 16);
        assert!(us(at) - us(10) <= cfg.detection_bound());
    }

    #[test]
    fn healthy_element_never_declared() {
        let cfg = MonitorConfig { interval: us(4), miss_threshold: 3 };
        let mut m = RackMonitor::new(RackId(0), cfg);
        m.watch(ComputeId(1), SimTime::ZERO);
        for t in (0..1000).step_by(4) {
            m.on_heartbeat(ComputeId(1), us(t + 1));
            assert!(m.check(us(t + 2)).is_empty());
        }
    }

    #[test]
    fn each_failure_declared_once() {
        let cfg = MonitorConfig { interval: us(2), miss_threshold: 1 };
        let mut m = RackMonitor::new(RackId(0), cfg);
        m.watch(ComputeId(0), SimTime::ZERO);
        assert_eq!(m.check(us(3)).len(), 1);
        assert!(m.check(us(5)).is_empty());
    }

    #[test]
    fn failed_monitor_is_blind() {
        let cfg = MonitorConfig::for_rtt(us(2));
        assert_eq!(cfg.interval, us(4));
        let mut m = RackMonitor::new(RackId(0), cfg);
        m.watch(ComputeId(0), SimTime::ZERO);
        assert!(m.fail());
        assert!(!m.fail());
        assert!(m.check(us(1000)).is_empty());
    }

    #[test]
    fn handlers_replace_and_run_once() {
        let mut m = RackMonitor::new(RackId(0), MonitorConfig::for_rtt(us(2)));
        let p = ProcessId::new(1);
        m.register_handler(p, FastFailureHandler { steps: vec![HandlerStep::FenceCompute] });
        m.register_handler(p, FastFailureHandler { steps: vec![] });
        assert_eq!(m.take_handler(p).unwrap().steps.len(), 0);
        assert!(m.take_handler(p).is_none());
    }

    #[test]
    fn notifications_run_last() {
        let h = FastFailureHandler {
            steps: vec![
                HandlerStep::NotifyGroup { members: vec![] },
                HandlerStep::RequestProvision { compute: ComputeId(3) },
                HandlerStep::TriggerStealOnBehalf,
            ],
        };
        let order: Vec<_> = h.ordered_steps().collect();
        assert!(matches!(order[2], HandlerStep::NotifyGroup { .. }));
        assert!(matches!(order[0], HandlerStep::RequestProvision { .. }));
    }
}

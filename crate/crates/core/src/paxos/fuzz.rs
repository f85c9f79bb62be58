//! Randomized failure schedules for a replica group, paired recovery runs
//! and detection-latency sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{ProcessId, RackId};
use crate::latency::{LatencyModel, Profile};
use crate::memory::FailureMode;
use crate::os::SignalKind;
use crate::rack::{Injection, RackConfig};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

use super::app::{PaxosCluster, PaxosParams};
use super::check::{self, RecoveryMetrics};
use super::types::Strategy;

/// Standard deployment: three replica racks and a client rack, each with
/// three compute and two memory elements.
pub fn default_config(profile: Profile) -> RackConfig {
    RackConfig::new(4, 3, 2, LatencyModel::profile(profile))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzCase {
    pub seed: u64,
    pub strategy: Strategy,
    pub jitter_fraction: f64,
    pub schedule: Vec<(SimTime, Injection)>,
    pub horizon: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzOutcome {
    pub case: FuzzCase,
    pub agreement_violations: Vec<String>,
    pub post_fence_mutations: Vec<String>,
    pub commands_chosen: usize,
    pub final_epoch: u64,
}

impl FuzzOutcome {
    pub fn ok(&self) -> bool {
        self.agreement_violations.is_empty() && self.post_fence_mutations.is_empty()
    }
}

/// Draws a failure schedule from `seed`: one to three injections among
/// compute crashes and stalls, memory failures, process crashes and, rarely,
/// a monitor failure, on top of random message delay.
pub fn random_case(seed: u64, base: &RackConfig) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strategy = if rng.gen_bool(0.5) { Strategy::Reincarnate } else { Strategy::Transfer };
    let jitter_fraction = *[0.0, 0.25, 0.5, 0.9].choose(&mut rng).expect("non-empty");
    let n = rng.gen_range(1..=3);
    let mut schedule = Vec::new();
    for _ in 0..n {
        let at = SimTime::from_micros(rng.gen_range(150..1500));
        let r = rng.gen_range(0..3u16);
        let compute = base.compute(r, rng.gen_range(0..base.computes_per_rack));
        let inj = match rng.gen_range(0..100) {
            0..=29 => Injection::CrashCompute { compute },
            30..=54 => Injection::StallCompute { compute, duration: SimTime::from_micros(rng.gen_range(20..600)) },
            55..=79 => {
                let element = base.memory(r, rng.gen_range(0..base.memory_per_rack));
                let mode = match rng.gen_range(0..3) {
                    0 => None,
                    1 => Some(FailureMode::Silent),
                    _ => Some(FailureMode::Explicit),
                };
                Injection::FailMemory { element, mode }
            }
            // replicas are spawned first, so pid r is member r
            80..=94 => Injection::CrashProcess { pid: ProcessId::new(r as u8) },
            _ => Injection::FailMonitor { rack: RackId(r) },
        };
        schedule.push((at, inj));
    }
    schedule.sort_by_key(|(t, _)| *t);
    FuzzCase { seed, strategy, jitter_fraction, schedule, horizon: SimTime::from_micros(4000) }
}

pub fn run_case(case: &FuzzCase, base: &RackConfig, params: &PaxosParams) -> Result<(FuzzOutcome, PaxosCluster), String> {
    let mut cfg = base.clone();
    cfg.seed = case.seed;
    cfg.latency.jitter_fraction = case.jitter_fraction;
    let params = PaxosParams { strategy: case.strategy, ..params.clone() };
    let mut c = PaxosCluster::new(cfg, params)?;
    for (at, inj) in &case.schedule {
        c.rack.inject_at(*at, inj.clone());
    }
    c.run_until(case.horizon);
    let trace = c.rack.trace();
    let m = check::recovery_metrics(trace, SimTime::ZERO);
    let out = FuzzOutcome {
        case: case.clone(),
        agreement_violations: check::agreement_violations(trace),
        post_fence_mutations: check::post_fence_mutations(trace),
        commands_chosen: m.client_commands_chosen,
        final_epoch: m.final_epoch,
    };
    Ok((out, c))
}

/// Runs `seeds` across the available cores. Outcomes come back in seed order.
pub fn fuzz_seeds(seeds: std::ops::Range<u64>, base: &RackConfig, params: &PaxosParams) -> Result<Vec<FuzzOutcome>, String> {
    let seeds: Vec<u64> = seeds.collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| run_case(&random_case(seed, base), base, params).map(|(o, _)| o))
                        .collect::<Result<Vec<_>, String>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().map_err(|_| "fuzz worker panicked".to_string())??);
        }
        Ok(out)
    })
}

/// Crashes the leader's compute element at `failure_at` once per strategy
/// on otherwise identical runs.
pub fn paired_leader_crash(
    base: &RackConfig,
    params: &PaxosParams,
    failure_at: SimTime,
    horizon: SimTime,
) -> Result<(RecoveryMetrics, RecoveryMetrics), String> {
    let run = |strategy| -> Result<RecoveryMetrics, String> {
        let mut c = PaxosCluster::new(base.clone(), PaxosParams { strategy, ..params.clone() })?;
        c.run_until(failure_at);
        let (_, compute) = c.leader().ok_or("no leader before the failure")?;
        c.rack.inject_now(Injection::CrashCompute { compute });
        c.run_until(horizon);
        Ok(check::recovery_metrics(c.rack.trace(), failure_at))
    };
    Ok((run(Strategy::Reincarnate)?, run(Strategy::Transfer)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub runs: usize,
    /// End-to-end suspicion timeout of the replicas.
    pub timeout: SimTime,
    pub detections: Vec<SimTime>,
    pub max_detection: Option<SimTime>,
    /// Fault to first notice at a peer, for a failed memory element.
    pub notice_delay: Option<SimTime>,
    pub notice_margin: Option<SimTime>,
}

impl DetectionReport {
    pub fn all_detected_before_timeout(&self) -> bool {
        self.detections.len() == self.runs && self.detections.iter().all(|&d| d < self.timeout)
    }
}

/// Crashes the leader's compute at `runs` different offsets within a
/// heartbeat period and measures monitor detection. Then fails the leader's
/// memory and measures when a peer is told.
pub fn detection_sweep(base: &RackConfig, params: &PaxosParams, runs: usize) -> Result<DetectionReport, String> {
    detection_sweep_traced(base, params, runs).map(|(r, _)| r)
}

/// As [`detection_sweep`], also returning the trace of every run.
pub fn detection_sweep_traced(
    base: &RackConfig,
    params: &PaxosParams,
    runs: usize,
) -> Result<(DetectionReport, Vec<SimTrace>), String> {
    let mut traces = Vec::new();
    let start = SimTime::from_micros(500);
    let period = base.monitor.as_ref().map_or(SimTime::from_micros(4), |m| m.interval);
    let mut detections = Vec::new();
    let mut timeout = SimTime::ZERO;
    for i in 0..runs {
        let mut c = PaxosCluster::new(base.clone(), params.clone())?;
        timeout = c.app.timing().suspicion;
        c.run_until(start);
        let (_, compute) = c.leader().ok_or("no leader")?;
        let at = start + SimTime::from_nanos(period.as_nanos() * i as u64 / runs.max(1) as u64);
        c.rack.inject_at(at, Injection::CrashCompute { compute });
        c.run_until(at + SimTime::from_micros(400));
        let found = c.rack.trace().iter().find_map(|r| match r.event {
            TraceEvent::Detect { compute: d, .. } if d == compute && r.t >= at => Some(r.t - at),
            _ => None,
        });
        detections.extend(found);
        traces.push(c.rack.take_trace());
    }
    let (notice_delay, t, trace) = memory_notice(base, params, start)?;
    traces.push(trace);
    timeout = timeout.max(t);
    let report = DetectionReport {
        runs,
        timeout,
        max_detection: detections.iter().copied().max(),
        detections,
        notice_delay,
        notice_margin: notice_delay.and_then(|d| timeout.as_nanos().checked_sub(d.as_nanos())).map(SimTime::from_nanos),
    };
    Ok((report, traces))
}

type Notice = (Option<SimTime>, SimTime, SimTrace);

fn memory_notice(base: &RackConfig, params: &PaxosParams, at: SimTime) -> Result<Notice, String> {
    let mut c = PaxosCluster::new(base.clone(), params.clone())?;
    let timeout = c.app.timing().suspicion;
    c.run_until(at);
    let (leader, compute) = c.leader().ok_or("no leader")?;
    let rack = c.rack.rack_of(compute);
    for i in 0..base.memory_per_rack {
        c.rack.inject_now(Injection::FailMemory { element: base.memory(rack.0, i), mode: None });
    }
    c.run_until(at + SimTime::from_micros(1000));
    let trace = c.rack.trace();
    let fault = trace
        .app_events("paxos", "memory-failure")
        .find_map(|(_, f)| f["fault_ns"].as_u64())
        .map(SimTime::from_nanos);
    let arrival = trace.iter().find_map(|r| match r.event {
        TraceEvent::Signal { pid, signal: SignalKind::GroupFailureNotice, .. } if pid != leader => Some(r.t),
        _ => None,
    });
    let delay = fault.zip(arrival).map(|(f, a)| a - f);
    Ok((delay, timeout, c.rack.take_trace()))
}

//! Runs scenarios: one deterministic run, a seed sweep, or a crash sweep,
//! each producing a report with metrics and a pass/fail line per check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::heap::sweep::{crash_sweep as heap_crash_sweep, run_on_rack, Workload};
use crate::latency::{LatencyModel, LinkClass, Profile};
use crate::paxos::check;
use crate::paxos::fuzz::{detection_sweep_traced, random_case, run_case};
use crate::paxos::{PaxosCluster, PaxosParams, Strategy};
use crate::primitives::{run_script_traced, PrimitivesParams, Property};
use crate::rack::Injection;
use crate::scenario::{
    ConfigError, HeapSection, PaxosSection, PrimitivesSection, ScenarioConfig, ShuffleSection, StragglerSection,
    WorkloadSection,
};
use crate::shuffle::{speedup, Mitigation, ShuffleParams, ShuffleRun, StragglerParams, StragglerRun, TransferMode};
use crate::time::SimTime;
use crate::trace::{SimTrace, TraceEvent};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
}

impl Overrides {
    pub fn apply(&self, cfg: &ScenarioConfig) -> ScenarioConfig {
        let mut cfg = cfg.clone();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.profile {
            cfg.set_profile(p);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Checks keyed by name: a check evaluated more than once (say, per run
/// of a paired scenario) passes only if every evaluation passed.
#[derive(Debug, Default)]
struct Checks(Vec<CheckResult>);

impl Checks {
    fn add(&mut self, name: &str, passed: bool, detail: impl FnOnce() -> String) {
        let detail = (!passed).then(detail);
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.passed &= passed;
                if c.detail.is_none() {
                    c.detail = detail;
                }
            }
            None => self.0.push(CheckResult { name: name.to_string(), passed, detail }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub workload: String,
    pub seed: u64,
    pub latency: LatencyModel,
    pub metrics: BTreeMap<String, Value>,
    pub trace: Option<String>,
    pub invariants: Vec<CheckResult>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} ({}, seed {})", self.scenario, self.workload, self.seed);
        let l = &self.latency;
        let _ = writeln!(
            s,
            "latency: interconnect {} intra-rack {} cross-rack {} jitter {}",
            l.rack_mmu_rtt, l.intra_rack_rtt, l.cross_rack_rtt, l.jitter_fraction
        );
        let _ = writeln!(s, "metrics:");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "  {k} = {v}");
        }
        let _ = writeln!(s, "invariants:");
        for c in &self.invariants {
            let _ = match &c.detail {
                Some(d) => writeln!(s, "  {} {}: {d}", if c.passed { "PASS" } else { "FAIL" }, c.name),
                None => writeln!(s, "  {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name),
            };
        }
        if let Some(t) = &self.trace {
            let _ = writeln!(s, "trace: {t}");
        }
        s
    }
}

/// A report and the traces behind it, one per simulated run, in run order.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<SimTrace>,
}

impl RunOutput {
    pub fn write_traces<W: Write>(&self, mut out: W) -> io::Result<()> {
        for t in &self.traces {
            t.write_jsonl(&mut out)?;
        }
        out.flush()
    }

    pub fn trace_jsonl(&self) -> String {
        self.traces.iter().map(SimTrace::to_jsonl).collect()
    }

    /// Writes every trace to `path` and records the path in the report.
    pub fn save_traces(&mut self, path: &Path) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_traces(io::BufWriter::new(f))?;
        self.report.trace = Some(path.display().to_string());
        Ok(())
    }
}

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    schedule: Vec<(SimTime, Injection)>,
    metrics: BTreeMap<String, Value>,
    checks: Checks,
    traces: Vec<SimTrace>,
}

fn us(t: SimTime) -> Value {
    json!(t.as_micros_f64())
}

fn opt_us(t: Option<SimTime>) -> Value {
    t.map_or(Value::Null, us)
}

fn sim_error(e: impl ToString) -> ConfigError {
    ConfigError::invalid("workload", e.to_string())
}

/// Round trips and ToR traffic as the trace records them: every memory
/// access and system call is one interconnect round trip.
fn traffic(trace: &SimTrace) -> (u64, Value) {
    let (mut interconnect, mut intra, mut cross, mut tor_bytes) = (0u64, 0u64, 0u64, 0u64);
    for r in trace.iter() {
        match &r.event {
            TraceEvent::Access { .. } | TraceEvent::Syscall { .. } => interconnect += 1,
            TraceEvent::NetSend { link, bytes, .. } => {
                match link {
                    LinkClass::IntraRackTor => intra += 1,
                    LinkClass::CrossRackTor => cross += 1,
                    LinkClass::RackMmuInterconnect => interconnect += 1,
                }
                if *link != LinkClass::RackMmuInterconnect {
                    tor_bytes += bytes;
                }
            }
            _ => {}
        }
    }
    (tor_bytes, json!({ "interconnect": interconnect, "intra_rack": intra, "cross_rack": cross }))
}

/// Runs one scenario as configured.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    let mut r = Run { cfg, schedule: cfg.schedule()?, metrics: BTreeMap::new(), checks: Checks::default(), traces: Vec::new() };
    match &cfg.workload {
        WorkloadSection::Paxos(p) => r.paxos(p)?,
        WorkloadSection::Shuffle(s) => r.shuffle(s)?,
        WorkloadSection::Straggler(s) => r.straggler(s)?,
        WorkloadSection::PrimitiveScript(p) => r.primitives(p),
        WorkloadSection::HeapSweep(h) => r.heap(h)?,
    }
    Ok(r.finish())
}

pub fn run_with(cfg: &ScenarioConfig, overrides: Overrides) -> Result<RunOutput, ConfigError> {
    run(&overrides.apply(cfg))
}

impl Run<'_> {
    fn finish(self) -> RunOutput {
        let report = RunReport {
            scenario: self.cfg.name.clone(),
            workload: self.cfg.workload.kind().to_string(),
            seed: self.cfg.seed,
            latency: self.cfg.latency(),
            metrics: self.metrics,
            trace: None,
            invariants: self.checks.0,
        };
        RunOutput { report, traces: self.traces }
    }

    fn paxos(&mut self, p: &PaxosSection) -> Result<(), ConfigError> {
        let base = self.cfg.rack_config();
        let params = PaxosParams {
            strategy: p.strategies[0],
            replicas: p.replicas,
            commands: p.commands,
            command_interval: p.command_interval_us,
            client_start: p.client_start_us,
        };
        if let Some(n) = p.detection_runs {
            let (d, traces) = detection_sweep_traced(&base, &params, n).map_err(sim_error)?;
            self.traces = traces;
            self.metrics.insert("detections_us".into(), json!(d.detections.iter().map(|t| t.as_micros_f64()).collect::<Vec<_>>()));
            self.metrics.insert("max_detection_us".into(), opt_us(d.max_detection));
            self.metrics.insert("suspicion_timeout_us".into(), us(d.timeout));
            self.metrics.insert("memory_notice_delay_us".into(), opt_us(d.notice_delay));
            self.metrics.insert("memory_notice_margin_us".into(), opt_us(d.notice_margin));
            self.checks.add("detection-before-timeout", d.all_detected_before_timeout(), || {
                format!("{} of {} runs detected, slowest {:?}, timeout {}", d.detections.len(), d.runs, d.max_detection, d.timeout)
            });
            if let Some(min) = p.min_notice_margin_us {
                let ok = d.notice_margin.is_some_and(|m| m > min);
                self.checks.add("memory-notice-margin", ok, || format!("margin {:?}, wanted more than {min}", d.notice_margin));
            }
            return Ok(());
        }
        if p.random_schedule {
            let case = random_case(self.cfg.seed, &base);
            let (out, mut c) = run_case(&case, &base, &params).map_err(sim_error)?;
            self.metrics.insert("strategy".into(), json!(case.strategy));
            self.metrics.insert("jitter_fraction".into(), json!(case.jitter_fraction));
            self.metrics.insert("schedule".into(), json!(case.schedule));
            self.metrics.insert("commands_chosen".into(), json!(out.commands_chosen));
            self.metrics.insert("final_epoch".into(), json!(out.final_epoch));
            self.safety_checks(c.rack.trace());
            self.traces.push(c.rack.take_trace());
            return Ok(());
        }
        let failure_at = self.schedule.first().map_or(SimTime::ZERO, |(t, _)| *t);
        let mut runs = Vec::new();
        let mut recovery = BTreeMap::new();
        for &strategy in &p.strategies {
            let mut c = PaxosCluster::new(base.clone(), PaxosParams { strategy, ..params.clone() }).map_err(sim_error)?;
            for (at, inj) in &self.schedule {
                c.rack.inject_at(*at, inj.clone());
            }
            c.run_until(p.horizon_us);
            let m = check::recovery_metrics(c.rack.trace(), failure_at);
            self.safety_checks(c.rack.trace());
            if let Some(e) = p.expect_epoch {
                self.checks.add("expected-epoch", m.final_epoch == e, || format!("{strategy:?} ended in epoch {}, expected {e}", m.final_epoch));
            }
            if p.expect_all_chosen {
                let want = p.commands as usize;
                self.checks.add("all-commands-chosen", m.client_commands_chosen == want, || {
                    format!("{strategy:?} chose {} of {want}", m.client_commands_chosen)
                });
            }
            let (tor_bytes, rtt_counts) = traffic(c.rack.trace());
            runs.push(json!({
                "strategy": strategy,
                "time_to_next_chosen_us": opt_us(m.time_to_next_chosen),
                "time_to_full_health_us": opt_us(m.time_to_full_health),
                "snapshot_bytes": m.snapshot_bytes,
                "commands_chosen": m.client_commands_chosen,
                "final_epoch": m.final_epoch,
                "tor_bytes": tor_bytes,
                "rtt_counts": rtt_counts,
            }));
            recovery.insert(strategy_key(strategy), m);
            self.traces.push(c.rack.take_trace());
        }
        if let (Some(re), Some(tr)) = (recovery.get(&0), recovery.get(&1)) {
            if !self.schedule.is_empty() {
                let faster = matches!((re.time_to_next_chosen, tr.time_to_next_chosen), (Some(a), Some(b)) if a < b);
                let uses_memory = self.schedule.iter().any(|(_, i)| matches!(i, Injection::FailMemory { .. }));
                // with its memory gone a replica cannot be reincarnated, and
                // both strategies transfer state
                if !uses_memory {
                    self.checks.add("reincarnation-recovers-first", faster, || {
                        format!("{:?} vs {:?}", re.time_to_next_chosen, tr.time_to_next_chosen)
                    });
                    self.checks.add("reincarnation-copies-no-state", re.snapshot_bytes == 0 && re.final_epoch == 0, || {
                        format!("{} snapshot bytes, epoch {}", re.snapshot_bytes, re.final_epoch)
                    });
                }
            }
        }
        self.metrics.insert("runs".into(), Value::Array(runs));
        Ok(())
    }

    fn safety_checks(&mut self, trace: &SimTrace) {
        let a = check::agreement_violations(trace);
        self.checks.add("agreement", a.is_empty(), || a.join("; "));
        let f = check::post_fence_mutations(trace);
        self.checks.add("no-post-fence-mutation", f.is_empty(), || f.join("; "));
    }

    fn shuffle(&mut self, s: &ShuffleSection) -> Result<(), ConfigError> {
        let mut reports = Vec::new();
        let mut jobs = Vec::new();
        for &mode in &s.modes {
            let params = ShuffleParams {
                mappers: s.mappers,
                reducers: s.reducers,
                pages_per_partition: s.pages_per_partition,
                mode,
                map_time: s.map_time_us,
                seed: self.cfg.seed,
            };
            let mut run = ShuffleRun::new(self.cfg.rack_config(), params).map_err(sim_error)?;
            for (at, inj) in &self.schedule {
                run.rack.inject_at(*at, inj.clone());
            }
            let rep = run.run(s.limit_us);
            let want = s.reducers as usize;
            self.checks.add("all-reducers-done", rep.reducers_done == want, || {
                format!("{}: {} of {want} reducers finished", mode.name(), rep.reducers_done)
            });
            self.checks.add("checksums-match", rep.checksums_match, || format!("{}: a reducer saw different bytes", mode.name()));
            if mode == TransferMode::Grant {
                self.checks.add("grant-sends-no-data-over-tor", rep.tor_bytes == 0, || format!("{} bytes", rep.tor_bytes));
            }
            jobs.push(json!({
                "mode": mode.name(),
                "total_time_us": opt_us(rep.job_time),
                "transfer_time_us": us(rep.transfer_time),
                "tor_bytes": rep.tor_bytes,
                "rtt_counts": {
                    "per_transfer": rep.measured_round_trips,
                    "total": rep.round_trips,
                    "tor_messages": rep.tor_messages,
                },
                "reexecuted_units": 0,
            }));
            reports.push(rep);
            self.traces.push(run.rack.take_trace());
        }
        let find = |m| reports.iter().find(|r| r.mode == Some(m));
        if let (Some(t), Some(g)) = (find(TransferMode::Transparent), find(TransferMode::Grant)) {
            self.metrics.insert("speedup".into(), json!(speedup(t, g)));
        }
        self.metrics.insert("jobs".into(), Value::Array(jobs));
        Ok(())
    }

    fn straggler(&mut self, s: &StragglerSection) -> Result<(), ConfigError> {
        let mut jobs = Vec::new();
        let mut reexec = BTreeMap::new();
        for &mode in &s.modes {
            let params = StragglerParams {
                tasks: s.tasks,
                units: s.units,
                unit_time: s.unit_time_us,
                straggler: s.straggler,
                slowdown: s.slowdown,
                slack: s.slack,
                check_interval: s.check_interval_us,
                mitigation: mode,
                spares: s.spares,
            };
            let mut run = StragglerRun::new(self.cfg.rack_config(), params).map_err(sim_error)?;
            for (at, inj) in &self.schedule {
                run.rack.inject_at(*at, inj.clone());
            }
            let rep = run.run(s.limit_us);
            let want = s.tasks as usize;
            self.checks.add("all-tasks-done", rep.tasks_done == want, || {
                format!("{}: {} of {want} tasks finished", mode.name(), rep.tasks_done)
            });
            if mode == Mitigation::Steal {
                self.checks.add("reexecuted-within-in-flight", rep.reexecuted_units <= rep.in_flight_units, || {
                    format!("{} re-executed, {} in flight", rep.reexecuted_units, rep.in_flight_units)
                });
            }
            let (tor_bytes, rtt_counts) = traffic(run.rack.trace());
            jobs.push(json!({
                "mode": mode.name(),
                "total_time_us": opt_us(rep.job_time),
                "tor_bytes": tor_bytes,
                "rtt_counts": rtt_counts,
                "reexecuted_units": rep.reexecuted_units,
                "in_flight_units": rep.in_flight_units,
                "units_committed": rep.units_committed,
                "mitigations": rep.mitigations,
                "timeout_limit_us": opt_us(rep.timeout_limit),
            }));
            reexec.insert(mode.name(), rep.reexecuted_units);
            self.traces.push(run.rack.take_trace());
        }
        if let (Some(&st), Some(&re)) = (reexec.get("steal"), reexec.get("restart")) {
            self.checks.add("steal-reexecutes-less-than-restart", st < re, || format!("steal {st}, restart {re}"));
        }
        self.metrics.insert("jobs".into(), Value::Array(jobs));
        Ok(())
    }

    fn primitives(&mut self, p: &PrimitivesSection) {
        let params = PrimitivesParams { processes: p.processes, pages_per_process: p.pages_per_process, ops: p.ops };
        let (out, trace) = run_script_traced(self.cfg.seed, &params, p.planted_bug);
        for prop in Property::ALL {
            let first = out.violations.iter().find(|v| v.property == prop);
            self.checks.add(prop.name(), first.is_none(), || first.map(|v| v.detail.clone()).unwrap_or_default());
        }
        self.metrics.insert("steps".into(), json!(out.steps.len()));
        self.metrics.insert("violations".into(), json!(out.violations.len()));
        self.traces.push(trace);
    }

    fn heap(&mut self, h: &HeapSection) -> Result<(), ConfigError> {
        let w = Workload::generate(self.cfg.seed, h.transactions);
        let (run, trace) = run_on_rack(&w, h.write_order, self.cfg.rack_config()).map_err(sim_error)?;
        self.checks.add("matches-oracle", run.matches_oracle, || "final arena differs from the sequential oracle".into());
        self.metrics.insert("transactions".into(), json!(h.transactions));
        self.metrics.insert("committed".into(), json!(run.committed));
        self.metrics.insert("finished_at_us".into(), us(run.finished_at));
        self.traces.push(trace);
        Ok(())
    }
}

fn strategy_key(s: Strategy) -> u8 {
    match s {
        Strategy::Reincarnate => 0,
        Strategy::Transfer => 1,
    }
}

/// Crashes the scenario's heap workload after every write, recovers, and
/// compares with the oracle.
pub fn crash_sweep(cfg: &ScenarioConfig) -> Result<RunReport, ConfigError> {
    let WorkloadSection::HeapSweep(h) = &cfg.workload else {
        return Err(ConfigError::invalid("workload.kind", format!("crash-sweep needs heap-sweep, found {}", cfg.workload.kind())));
    };
    let w = Workload::generate(cfg.seed, h.transactions);
    let rep = heap_crash_sweep(&w, h.write_order);
    let mut checks = Checks::default();
    checks.add("committed-prefix-recovery", rep.passed(), || {
        let f = &rep.failures[0];
        format!("{} failing crash points, first after {} writes: {}", rep.failures.len(), f.crash_after_writes, f.detail)
    });
    let mut metrics = BTreeMap::new();
    metrics.insert("transactions".into(), json!(rep.transactions));
    metrics.insert("total_writes".into(), json!(rep.total_writes));
    metrics.insert("crash_points".into(), json!(rep.crash_points));
    metrics.insert("failures".into(), json!(rep.failures.len()));
    Ok(RunReport {
        scenario: cfg.name.clone(),
        workload: cfg.workload.kind().to_string(),
        seed: cfg.seed,
        latency: cfg.latency(),
        metrics,
        trace: None,
        invariants: checks.0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FuzzFailure {
    pub seed: u64,
    pub failed: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzReport {
    pub scenario: String,
    pub base_seed: u64,
    pub runs: usize,
    pub checks: BTreeMap<String, Tally>,
    pub failures: Vec<FuzzFailure>,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// The lowest failing seed; `run --seed` with it replays the failure.
    pub fn reproducing_seed(&self) -> Option<u64> {
        self.failures.first().map(|f| f.seed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fuzz {}: {} runs from seed {}", self.scenario, self.runs, self.base_seed);
        for (name, t) in &self.checks {
            let _ = writeln!(s, "  {} {name}: {} passed, {} failed", if t.failed == 0 { "PASS" } else { "FAIL" }, t.passed, t.failed);
        }
        if let Some(f) = self.failures.first() {
            let _ = writeln!(s, "{} failing seeds; reproduce with --seed {}", self.failures.len(), f.seed);
            for c in &f.failed {
                let _ = writeln!(s, "  {}: {}", c.name, c.detail.as_deref().unwrap_or(""));
            }
        }
        s
    }
}

/// Runs seeds `base, base+1, ..., base+n-1` across the available cores,
/// each on its own simulator.
pub fn fuzz(cfg: &ScenarioConfig, n: usize, overrides: Overrides) -> Result<FuzzReport, ConfigError> {
    let base = overrides.apply(cfg);
    let seeds: Vec<u64> = (0..n as u64).map(|i| base.seed.wrapping_add(i)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(seeds.len()).max(1);
    let chunk = seeds.len().div_ceil(workers).max(1);
    let results: Vec<(u64, Vec<CheckResult>)> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let base = &base;
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let cfg = ScenarioConfig { seed, ..base.clone() };
                            run(&cfg).map(|o| (seed, o.report.invariants))
                        })
                        .collect::<Result<Vec<_>, ConfigError>>()
                })
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("fuzz worker panicked")?);
        }
        Ok::<_, ConfigError>(all)
    })?;
    let mut checks: BTreeMap<String, Tally> = BTreeMap::new();
    let mut failures = Vec::new();
    for (seed, inv) in results {
        for c in &inv {
            let t = checks.entry(c.name.clone()).or_default();
            if c.passed {
                t.passed += 1;
            } else {
                t.failed += 1;
            }
        }
        let failed: Vec<CheckResult> = inv.into_iter().filter(|c| !c.passed).collect();
        if !failed.is_empty() {
            failures.push(FuzzFailure { seed, failed });
        }
    }
    failures.sort_by_key(|f| f.seed);
    Ok(FuzzReport { scenario: base.name.clone(), base_seed: base.seed, runs: n, checks, failures })
}

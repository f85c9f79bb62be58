//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

use std::time::{Duration, Instant};

use ddc_sim::latency::{LatencyModel, LinkClass, Profile};
use ddc_sim::paxos::fuzz::random_case;
use ddc_sim::paxos::Strategy;
use ddc_sim::rack::{Injection, Rack};
use ddc_sim::runner::{self, Overrides, RunReport};
use ddc_sim::scenario::{ScenarioConfig, BUNDLED};
use ddc_sim::time::SimTime;
use serde_json::Value;

type Outcome = Result<String, String>;

fn load(name: &str) -> Result<ScenarioConfig, String> {
    ScenarioConfig::resolve(name).map_err(|e| e.to_string())
}

fn run(name: &str) -> Result<RunReport, String> {
    Ok(runner::run(&load(name)?).map_err(|e| e.to_string())?.report)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("took {e:.2?}, limit {limit:?}"))
}

fn job<'a>(r: &'a RunReport, mode: &str) -> Result<&'a Value, String> {
    r.metrics["jobs"]
        .as_array()
        .and_then(|j| j.iter().find(|j| j["mode"] == mode))
        .ok_or_else(|| format!("no {mode} job in report"))
}

fn shuffle_speedup() -> Outcome {
    let t = Instant::now();
    let r = run("shuffle_3rtt_vs_grant")?;
    let transparent = job(&r, "transparent")?["transfer_time_us"].as_f64();
    let grant = job(&r, "grant")?["transfer_time_us"].as_f64();
    let speedup = r.metrics["speedup"].as_f64();
    ensure(transparent == Some(6.0) && grant == Some(2.0) && speedup == Some(3.0), || {
        format!("transparent {transparent:?}us, grant {grant:?}us, speedup {speedup:?}")
    })?;
    ensure(r.passed(), || r.to_text())?;
    within(t, Duration::from_secs(1))?;
    Ok(format!("transparent 6us, grant 2us, speedup {}", speedup.unwrap_or(0.0)))
}

fn latency_table() -> Outcome {
    let us = SimTime::from_micros;
    let expect = [(Profile::Current, us(2)), (Profile::Future, us(1)), (Profile::Cloud, us(2))];
    let mut cfg = load("paxos_reincarnate")?;
    for (profile, intra) in expect {
        cfg.set_profile(profile);
        let rack: Rack<()> = Rack::new(cfg.rack_config())?;
        let m = LatencyModel::profile(profile);
        for (link, want) in [(LinkClass::CrossRackTor, us(45)), (LinkClass::IntraRackTor, intra)] {
            ensure(rack.rtt(link) == want && m.rtt(link) == want, || {
                format!("{profile:?} {link:?}: rack {} model {}, want {want}", rack.rtt(link), m.rtt(link))
            })?;
        }
    }
    Ok("cross-rack 45us; intra-rack 2us current and cloud, 1us future".into())
}

fn paxos_safety() -> Outcome {
    let t = Instant::now();
    let cfg = load("paxos_fuzz")?;
    let rep = runner::fuzz(&cfg, 1000, Overrides::default()).map_err(|e| e.to_string())?;
    ensure(rep.runs == 1000, || format!("{} runs", rep.runs))?;
    ensure(rep.passed(), || rep.to_text())?;
    // the schedules really cover what the criterion asks for
    let base = cfg.rack_config();
    let cases: Vec<_> = (0..1000).map(|s| random_case(cfg.seed + s, &base)).collect();
    let has = |f: &dyn Fn(&Injection) -> bool| cases.iter().filter(|c| c.schedule.iter().any(|(_, i)| f(i))).count();
    let compute = has(&|i| matches!(i, Injection::CrashCompute { .. } | Injection::StallCompute { .. }));
    let memory = has(&|i| matches!(i, Injection::FailMemory { .. }));
    let delayed = cases.iter().filter(|c| c.jitter_fraction > 0.0).count();
    let reincarnate = cases.iter().filter(|c| c.strategy == Strategy::Reincarnate).count();
    ensure(compute > 0 && memory > 0 && delayed > 0 && reincarnate > 0 && reincarnate < 1000, || {
        format!("coverage: compute {compute}, memory {memory}, delayed {delayed}, reincarnate {reincarnate}")
    })?;
    within(t, Duration::from_secs(120))?;
    Ok(format!(
        "1000 seeds, 0 agreement violations, 0 post-fence mutations ({compute} with compute faults, {memory} memory, {delayed} delayed, {reincarnate} reincarnate) in {:.1?}",
        t.elapsed()
    ))
}

fn reincarnation_advantage() -> Outcome {
    let t = Instant::now();
    let r = run("paxos_paired")?;
    let runs = r.metrics["runs"].as_array().ok_or("no runs")?;
    let by = |s: &str| runs.iter().find(|x| x["strategy"] == s).ok_or_else(|| format!("no {s} run"));
    let (re, tr) = (by("reincarnate")?, by("transfer")?);
    let (a, b) = (re["time_to_next_chosen_us"].as_f64(), tr["time_to_next_chosen_us"].as_f64());
    ensure(matches!((a, b), (Some(a), Some(b)) if a < b), || format!("reincarnate {a:?}us, transfer {b:?}us"))?;
    ensure(re["snapshot_bytes"] == 0 && re["final_epoch"] == 0, || format!("reincarnate run {re}"))?;
    ensure(r.passed(), || r.to_text())?;
    within(t, Duration::from_secs(5))?;
    Ok(format!(
        "next chosen {}us after reincarnation vs {}us after transfer; 0 snapshot bytes, epoch 0",
        a.unwrap_or(0.0),
        b.unwrap_or(0.0)
    ))
}

fn early_detection() -> Outcome {
    let t = Instant::now();
    let cfg = load("paxos_detection")?;
    ensure(cfg.latency.profile == Profile::Cloud && cfg.monitor == Default::default(), || {
        "scenario must use the cloud profile and the default monitor".into()
    })?;
    let r = runner::run(&cfg).map_err(|e| e.to_string())?.report;
    let timeout = r.metrics["suspicion_timeout_us"].as_f64();
    let detections: Vec<f64> =
        r.metrics["detections_us"].as_array().ok_or("no detections")?.iter().filter_map(Value::as_f64).collect();
    let margin = r.metrics["memory_notice_margin_us"].as_f64();
    ensure(timeout == Some(135.0), || format!("timeout {timeout:?}"))?;
    ensure(detections.len() == 20 && detections.iter().all(|&d| d < 135.0), || format!("detections {detections:?}"))?;
    ensure(margin.is_some_and(|m| m > 100.0), || format!("notice margin {margin:?}"))?;
    within(t, Duration::from_secs(5))?;
    let max = detections.iter().copied().fold(0.0, f64::max);
    Ok(format!("20/20 detected, slowest {max}us < 135us; memory notice {}us ahead of the timeout", margin.unwrap_or(0.0)))
}

fn crash_consistency() -> Outcome {
    let t = Instant::now();
    let r = runner::crash_sweep(&load("heap_crash_sweep")?).map_err(|e| e.to_string())?;
    ensure(r.metrics["transactions"] == 50, || format!("{} transactions", r.metrics["transactions"]))?;
    ensure(r.passed(), || r.to_text())?;
    within(t, Duration::from_secs(60))?;
    Ok(format!("{} crash points over 50 transactions, all recover to the committed prefix", r.metrics["crash_points"]))
}

fn primitive_invariants() -> Outcome {
    let t = Instant::now();
    let cfg = load("primitives_fuzz")?;
    let rep = runner::fuzz(&cfg, 1000, Overrides::default()).map_err(|e| e.to_string())?;
    ensure(rep.passed() && rep.runs == 1000, || rep.to_text())?;
    let props = ["single-owner", "address-stability", "content-preservation", "capability-soundness", "revoke-before-reassign"];
    for p in props {
        ensure(rep.checks.get(p).is_some_and(|c| c.passed == 1000), || format!("{p} not checked on every seed"))?;
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("1000 scripts of 4 processes x 32 pages, 0 violations in {:.1?}", t.elapsed()))
}

fn straggler_steal() -> Outcome {
    let t = Instant::now();
    let r = run("straggler_steal")?;
    let steal = job(&r, "steal")?;
    let restart = job(&r, "restart")?;
    let (re, inflight, base) =
        (steal["reexecuted_units"].as_u64(), steal["in_flight_units"].as_u64(), restart["reexecuted_units"].as_u64());
    ensure(matches!((re, inflight, base), (Some(r), Some(i), Some(b)) if r <= i && r < b), || {
        format!("steal re-executed {re:?} with {inflight:?} in flight, restart {base:?}")
    })?;
    within(t, Duration::from_secs(5))?;
    Ok(format!(
        "steal re-executed {} unit(s) with {} in flight; restart re-executed {}",
        re.unwrap_or(0),
        inflight.unwrap_or(0),
        base.unwrap_or(0)
    ))
}

fn determinism() -> Outcome {
    let t = Instant::now();
    for (name, _) in BUNDLED {
        let cfg = load(name)?;
        let a = runner::run(&cfg).map_err(|e| e.to_string())?;
        let b = runner::run(&cfg).map_err(|e| e.to_string())?;
        ensure(!a.traces.is_empty() && a.trace_jsonl() == b.trace_jsonl(), || format!("{name}: traces differ"))?;
        ensure(a.report == b.report, || format!("{name}: reports differ"))?;
    }
    within(t, Duration::from_secs(5))?;
    Ok(format!("{} bundled scenarios, byte-identical traces on a second run", BUNDLED.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("shuffle transfer 3 RTT vs grant 1 RTT", shuffle_speedup),
        ("latency table", latency_table),
        ("paxos safety under adversity", paxos_safety),
        ("reincarnation advantage", reincarnation_advantage),
        ("early failure detection", early_detection),
        ("crash consistency", crash_consistency),
        ("single owner and gift permanence", primitive_invariants),
        ("straggler stealing", straggler_steal),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

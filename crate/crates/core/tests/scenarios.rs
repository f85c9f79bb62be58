use ddc_sim::latency::Profile;
use ddc_sim::runner::{self, Overrides};
use ddc_sim::scenario::{ScenarioConfig, BUNDLED};

fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::resolve(name).unwrap()
}

#[test]
fn every_bundled_scenario_passes_its_checks() {
    for (name, _) in BUNDLED {
        let out = runner::run(&load(name)).unwrap();
        assert!(out.report.passed(), "{}", out.report.to_text());
        assert!(!out.report.invariants.is_empty(), "{name}");
        assert!(out.traces.iter().any(|t| !t.is_empty()), "{name}");
    }
}

#[test]
fn reincarnate_scenario_keeps_the_epoch() {
    let r = runner::run(&load("paxos_reincarnate")).unwrap().report;
    let run = &r.metrics["runs"][0];
    assert_eq!(run["final_epoch"], 0);
    assert_eq!(run["snapshot_bytes"], 0);
}

#[test]
fn future_profile_keeps_the_ratio() {
    let o = Overrides { profile: Some(Profile::Future), ..Default::default() };
    let r = runner::run_with(&load("shuffle_3rtt_vs_grant"), o).unwrap().report;
    assert_eq!(r.metrics["speedup"], 3.0);
    assert_eq!(r.metrics["jobs"][1]["transfer_time_us"], 1.0);
}

#[test]
fn fuzz_over_random_paxos_schedules() {
    let rep = runner::fuzz(&load("paxos_fuzz"), 50, Overrides::default()).unwrap();
    assert!(rep.passed(), "{}", rep.to_text());
    assert_eq!(rep.checks["agreement"].passed, 50);
}

#[test]
fn fuzz_seed_replays_under_run() {
    let cfg = load("paxos_fuzz");
    let a = runner::run_with(&cfg, Overrides { seed: Some(33), ..Default::default() }).unwrap();
    let b = runner::run(&ScenarioConfig { seed: 33, ..cfg }).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.trace_jsonl(), b.trace_jsonl());
}

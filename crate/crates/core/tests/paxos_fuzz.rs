use std::time::{Duration, Instant};

use ddc_sim::latency::Profile;
use ddc_sim::paxos::fuzz::{default_config, detection_sweep, fuzz_seeds, paired_leader_crash, random_case, run_case};
use ddc_sim::paxos::{PaxosParams, Strategy};
use ddc_sim::rack::Injection;
use ddc_sim::time::SimTime;

#[test]
fn thousand_random_schedules_stay_safe() {
    let base = default_config(Profile::Current);
    let t = Instant::now();
    let outcomes = fuzz_seeds(0..1000, &base, &PaxosParams::default()).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(outcomes.len(), 1000);
    for o in &outcomes {
        assert!(o.ok(), "seed {}: {o:#?}", o.case.seed);
    }
    let count = |f: &dyn Fn(&Injection) -> bool| outcomes.iter().filter(|o| o.case.schedule.iter().any(|(_, i)| f(i))).count();
    assert!(count(&|i| matches!(i, Injection::CrashCompute { .. })) > 100);
    assert!(count(&|i| matches!(i, Injection::FailMemory { .. })) > 100);
    assert!(count(&|i| matches!(i, Injection::StallCompute { .. })) > 100);
    assert!(outcomes.iter().filter(|o| o.case.jitter_fraction > 0.0).count() > 500);
    let reincarnate = outcomes.iter().filter(|o| o.case.strategy == Strategy::Reincarnate).count();
    assert!(reincarnate > 300 && reincarnate < 700);
    let live = outcomes.iter().filter(|o| o.commands_chosen == 20).count();
    println!("1000 schedules in {elapsed:?}, {live} chose every command");
    assert!(live > 800);
    assert!(elapsed < Duration::from_secs(120));
}

#[test]
fn case_replays_exactly() {
    let base = default_config(Profile::Current);
    let case = random_case(196, &base);
    assert_eq!(case, random_case(196, &base));
    let a = run_case(&case, &base, &PaxosParams::default()).unwrap().1.rack.trace().to_jsonl();
    let b = run_case(&case, &base, &PaxosParams::default()).unwrap().1.rack.trace().to_jsonl();
    assert_eq!(a, b);
}

#[test]
fn reincarnation_beats_transfer() {
    let base = default_config(Profile::Current);
    let t = Instant::now();
    let (re, tr) = paired_leader_crash(&base, &PaxosParams::default(), SimTime::from_micros(500), SimTime::from_micros(4000)).unwrap();
    println!("reincarnate {re:?}\ntransfer {tr:?}");
    let (a, b) = (re.time_to_next_chosen.unwrap(), tr.time_to_next_chosen.unwrap());
    assert!(a < b, "{a} vs {b}");
    assert_eq!(re.snapshot_bytes, 0);
    assert_eq!(re.final_epoch, 0);
    assert!(tr.snapshot_bytes > 0);
    assert_eq!(tr.final_epoch, 1);
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn monitor_detects_before_the_replica_timeout() {
    let base = default_config(Profile::Cloud);
    let t = Instant::now();
    let r = detection_sweep(&base, &PaxosParams::default(), 20).unwrap();
    println!("{r:?}");
    assert!(r.all_detected_before_timeout(), "{r:?}");
    assert_eq!(r.timeout, SimTime::from_micros(135));
    assert!(r.notice_margin.unwrap() > SimTime::from_micros(100), "{r:?}");
    assert!(t.elapsed() < Duration::from_secs(5));
}

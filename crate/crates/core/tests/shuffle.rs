use ddc_sim::latency::{LatencyModel, Profile};
use ddc_sim::rack::{Injection, RackConfig};
use ddc_sim::shuffle::{speedup, Mitigation, ShuffleParams, ShuffleRun, StragglerParams, StragglerRun, TransferMode};
use ddc_sim::time::SimTime;

fn us(n: u64) -> SimTime {
    SimTime::from_micros(n)
}

fn shuffle(mode: TransferMode, pages: usize) -> ddc_sim::shuffle::TransferReport {
    let cfg = RackConfig::new(1, 8, 2, LatencyModel::profile(Profile::Current));
    let params = ShuffleParams { mode, pages_per_partition: pages, ..ShuffleParams::default() };
    ShuffleRun::new(cfg, params).unwrap().run(us(10_000))
}

#[test]
fn grant_is_three_times_faster_than_copying() {
    let t = shuffle(TransferMode::Transparent, 1);
    let g = shuffle(TransferMode::Grant, 1);
    assert_eq!(t.transfer_time, us(6));
    assert_eq!(g.transfer_time, us(2));
    assert_eq!(speedup(&t, &g), Some(3.0));
    assert_eq!((t.round_trips, g.round_trips), (48, 16));
    assert_eq!((t.measured_round_trips, g.measured_round_trips), (Some(3), Some(1)));
    assert_eq!(g.tor_bytes, 0);
    assert_eq!(g.tor_messages, 0);
    assert_eq!(t.tor_bytes, 16 * 4096);
    assert!(t.checksums_match && g.checksums_match);
    assert_eq!((t.reducers_done, g.reducers_done), (4, 4));
}

#[test]
fn larger_partitions_keep_the_round_trip_count() {
    let t = shuffle(TransferMode::Transparent, 3);
    let g = shuffle(TransferMode::Grant, 3);
    assert_eq!(t.measured_round_trips, Some(3));
    assert_eq!(g.measured_round_trips, Some(1));
    assert!(t.checksums_match && g.checksums_match);
}

fn straggler(mitigation: Mitigation) -> ddc_sim::shuffle::StragglerReport {
    let cfg = RackConfig::new(1, 8, 2, LatencyModel::profile(Profile::Current));
    let mut run = StragglerRun::new(cfg, StragglerParams { mitigation, ..StragglerParams::default() }).unwrap();
    run.run(us(100_000))
}

#[test]
fn stealing_reexecutes_at_most_the_in_flight_unit() {
    let s = straggler(Mitigation::Steal);
    let r = straggler(Mitigation::Restart);
    let n = straggler(Mitigation::None);
    println!("{s:#?}\n{r:#?}\n{n:#?}");
    assert_eq!(s.tasks_done, 4);
    assert_eq!(r.tasks_done, 4);
    assert!(s.reexecuted_units <= s.in_flight_units);
    assert!(s.reexecuted_units < r.reexecuted_units);
    assert!(s.job_time < r.job_time);
    assert!(s.job_time < n.job_time);
}

#[test]
fn failed_compute_is_relaunched_before_the_timeout() {
    let cfg = RackConfig::new(1, 8, 2, LatencyModel::profile(Profile::Current));
    let params = StragglerParams { straggler: None, ..StragglerParams::default() };
    let mut run = StragglerRun::new(cfg, params).unwrap();
    let compute = run.task_compute(0);
    run.rack.inject_at(us(100), Injection::CrashCompute { compute });
    let rep = run.run(us(100_000));
    println!("{rep:?}");
    assert_eq!(rep.tasks_done, 4);
    let m = &rep.mitigations[0];
    assert_eq!(m.cause, "notice");
    let relaunch = m.relaunched_at.unwrap();
    let limit = rep.timeout_limit.expect("half the tasks finished");
    assert!(relaunch < us(100) + limit, "{relaunch} vs {limit}");
    assert!(rep.timeouts.is_empty());
    let detect = rep.detections[0];
    assert!(detect > us(100) && relaunch >= detect);
    assert!(rep.reexecuted_units <= rep.in_flight_units);
}


use ddc_sim::latency::{LatencyModel, Profile};
use ddc_sim::paxos::check;
use ddc_sim::os::SignalKind;
use ddc_sim::paxos::{PaxosCluster, PaxosParams, Strategy};
use ddc_sim::rack::{Injection, RackConfig};
use ddc_sim::time::SimTime;
use ddc_sim::trace::TraceEvent;

fn us(n: u64) -> SimTime {
    SimTime::from_micros(n)
}

fn cluster(strategy: Strategy) -> PaxosCluster {
    let cfg = RackConfig::new(4, 3, 2, LatencyModel::profile(Profile::Current));
    PaxosCluster::new(cfg, PaxosParams { strategy, ..PaxosParams::default() }).unwrap()
}

#[test]
fn healthy_cluster_chooses_every_command() {
    let mut c = cluster(Strategy::Reincarnate);
    c.run_until(us(3000));
    let trace = c.rack.trace();
    assert!(check::agreement_violations(trace).is_empty());
    let m = check::recovery_metrics(trace, SimTime::ZERO);
    assert_eq!(m.client_commands_chosen, 20, "{m:?}");
    assert_eq!(m.final_epoch, 0);
}

#[test]
fn leader_crash_recovers_under_both_strategies() {
    for strategy in [Strategy::Reincarnate, Strategy::Transfer] {
        let mut c = cluster(strategy);
        c.run_until(us(500));
        let (_, compute) = c.leader().expect("a leader by 500us");
        c.rack.inject_now(Injection::CrashCompute { compute });
        c.run_until(us(4000));
        let trace = c.rack.trace();
        let m = check::recovery_metrics(trace, us(500));
        assert!(check::agreement_violations(trace).is_empty());
        assert!(check::post_fence_mutations(trace).is_empty());
        assert_eq!(m.client_commands_chosen, 20, "{strategy:?}: {m:?}");
        assert!(m.time_to_full_health.is_some(), "{strategy:?}: {m:?}");
        match strategy {
            Strategy::Reincarnate => assert_eq!((m.final_epoch, m.snapshot_bytes), (0, 0)),
            Strategy::Transfer => assert!(m.final_epoch == 1 && m.snapshot_bytes > 0, "{m:?}"),
        }
    }
}

#[test]
fn stalled_leader_is_fenced_when_it_wakes() {
    let mut c = cluster(Strategy::Reincarnate);
    c.run_until(us(500));
    let (old, compute) = c.leader().unwrap();
    c.rack.inject_now(Injection::StallCompute { compute, duration: us(400) });
    c.run_until(us(3000));
    let trace = c.rack.trace();
    assert!(c.rack.is_fenced(compute));
    assert!(check::agreement_violations(trace).is_empty());
    let post = check::post_fence_mutations(trace);
    assert!(post.is_empty(), "{post:?}");
    // the old process did run again, and got nowhere
    let resumed = trace.of_kind("compute_resume").next().expect("compute resumes").t;
    let tried = trace.iter().any(|r| {
        r.t >= resumed
            && match &r.event {
                TraceEvent::NetDrop { from, reason: "fenced", .. } => *from == old,
                TraceEvent::Access { pid, fault: Some(_), .. } => *pid == old,
                TraceEvent::ProcessExit { pid, .. } => *pid == old,
                _ => false,
            }
    });
    assert!(tried, "old leader left no trace after waking");
    let m = check::recovery_metrics(trace, us(500));
    assert_eq!(m.client_commands_chosen, 20);
    assert_eq!(m.final_epoch, 0);
}

#[test]
fn memory_failure_is_announced_and_replaced() {
    for strategy in [Strategy::Reincarnate, Strategy::Transfer] {
        let mut c = cluster(strategy);
        c.run_until(us(500));
        let (leader, compute) = c.leader().unwrap();
        let rack = c.rack.rack_of(compute);
        let element = c.rack.config().memory(rack.0, 0);
        c.rack.inject_now(Injection::FailMemory { element, mode: None });
        c.run_until(us(4000));
        let trace = c.rack.trace();
        let (_, f) = trace.app_events("paxos", "memory-failure").next().expect("failure announced");
        assert_eq!(f["element"], element.0);
        let fault = SimTime::from_nanos(f["fault_ns"].as_u64().unwrap());
        let arrival = trace
            .iter()
            .find(|r| matches!(r.event, TraceEvent::Signal { signal: SignalKind::GroupFailureNotice, pid, .. } if pid != leader))
            .expect("a peer hears of it")
            .t;
        assert_eq!(arrival - fault, us(45) / 2);
        // no attempt to steal from dead memory
        assert!(trace.app_events("paxos", "reincarnate").next().is_none());
        let m = check::recovery_metrics(trace, us(500));
        assert_eq!(m.agreement_violations, 0);
        assert_eq!(m.final_epoch, 1, "{strategy:?}: {m:?}");
        assert_eq!(m.client_commands_chosen, 20, "{strategy:?}: {m:?}");
        assert!(trace.app_events("paxos", "installed").next().is_some());
    }
}

#[test]
fn dead_memory_and_compute_fall_back_to_transfer() {
    let mut c = cluster(Strategy::Reincarnate);
    c.run_until(us(500));
    let (_, compute) = c.leader().unwrap();
    let rack = c.rack.rack_of(compute);
    for i in 0..2 {
        let element = c.rack.config().memory(rack.0, i);
        c.rack.inject_now(Injection::FailMemory { element, mode: None });
    }
    c.rack.inject_now(Injection::CrashCompute { compute });
    c.run_until(us(5000));
    let trace = c.rack.trace();
    let m = check::recovery_metrics(trace, us(500));
    assert_eq!(m.agreement_violations, 0);
    assert_eq!(m.final_epoch, 1, "{m:?}");
    assert!(m.snapshot_bytes > 0);
    assert_eq!(m.client_commands_chosen, 20, "{m:?}");
}

#[test]
fn same_schedule_same_trace() {
    let run = || {
        let mut c = cluster(Strategy::Transfer);
        c.run_until(us(500));
        let (_, compute) = c.leader().unwrap();
        c.rack.inject_now(Injection::CrashCompute { compute });
        c.run_until(us(3000));
        c.rack.trace().to_jsonl()
    };
    assert_eq!(run(), run());
}

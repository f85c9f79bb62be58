use ddc_sim::addr::{ComputeId, MemId, ProcessId, RackId, VirtualPage};
use ddc_sim::latency::{LatencyModel, Profile};
use ddc_sim::memory::{AccessOp, FailureMode, Fault};
use ddc_sim::monitor::{FastFailureHandler, HandlerStep};
use ddc_sim::os::{FailureDescriptor, Signal, SignalKind};
use ddc_sim::rack::{AppEvent, Injection, Origin, Rack, RackConfig, SysReply};
use ddc_sim::time::SimTime;

fn us(n: u64) -> SimTime {
    SimTime::from_micros(n)
}

fn rack(racks: u16, computes: u16) -> Rack<u32> {
    let cfg = RackConfig::new(racks, computes, 1, LatencyModel::profile(Profile::Current));
    Rack::new(cfg).unwrap()
}

fn read(r: &mut Rack<u32>, pid: ProcessId, page: VirtualPage, len: usize) -> Result<Vec<u8>, Fault> {
    r.access_now(pid, page.base(), AccessOp::Read { len })
}

fn write(r: &mut Rack<u32>, pid: ProcessId, page: VirtualPage, data: &[u8]) -> Result<Vec<u8>, Fault> {
    r.access_now(pid, page.base(), AccessOp::Write { data: data.to_vec() })
}

#[test]
fn grant_completes_in_one_round_trip() {
    let mut r = rack(1, 2);
    let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    let p1 = r.spawn(ComputeId(1), Origin::Initial { role: 1 }).unwrap();
    let mut issued = None;
    let mut done = None;
    let mut added = None;
    let mut seen = Vec::new();
    let mut old_owner = None;
    let mut page = None;
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
            AppEvent::Started { .. } if pid == p0 => {
                let v = r.alloc_now(pid, 1, true).unwrap()[0];
                write(r, pid, v, b"payload").unwrap();
                page = Some(v);
                issued = Some(r.busy_until(pid));
                r.sys_grant(pid, vec![v], p1).unwrap();
            }
            AppEvent::Started { .. } => {
                r.sys_set_handler(pid, SignalKind::PageAdded, true).unwrap();
            }
            AppEvent::SyscallDone { result: Ok(SysReply::Granted(_)), .. } => {
                done = Some(r.now());
                r.sys_set_handler(pid, SignalKind::MemoryFault, true).unwrap();
                old_owner = Some(read(r, pid, page.unwrap(), 1));
            }
            AppEvent::Signal(Signal::PageAdded { pages }) => {
                added = Some(r.now());
                seen = read(r, pid, pages[0], 7).unwrap();
            }
            _ => {}
        };
        r.run_until(&mut app, us(100));
    }
    let issued = issued.unwrap();
    assert_eq!(added.unwrap() - issued, us(2));
    assert_eq!(done.unwrap() - issued, us(2));
    assert_eq!(seen, b"payload");
    assert!(old_owner.unwrap().is_err());
    r.mmu().check_invariants().unwrap();
}

#[test]
fn monitor_handler_reincarnates_on_spare() {
    let mut r = rack(1, 3);
    let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    let watcher = r.spawn(ComputeId(2), Origin::Initial { role: 9 }).unwrap();
    let mut recovered = None;
    let mut notice = None;
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
            AppEvent::Started { origin: Origin::Initial { role: 0 } } => {
                let v = r.alloc_now(pid, 2, true).unwrap();
                write(r, pid, v[1], b"state").unwrap();
                r.register_fast_failure_handler(
                    pid,
                    FastFailureHandler {
                        steps: vec![
                            HandlerStep::NotifyGroup { members: vec![watcher] },
                            HandlerStep::RequestProvision { compute: ComputeId(1) },
                            HandlerStep::TriggerStealOnBehalf,
                            HandlerStep::FenceCompute,
                        ],
                    },
                )
                .unwrap();
            }
            AppEvent::Started { origin: Origin::Initial { .. } } => {
                r.sys_set_handler(pid, SignalKind::GroupFailureNotice, true).unwrap();
            }
            AppEvent::Started { origin: Origin::Reincarnated { of, pages } } => {
                assert_eq!(of, p0);
                let data = read(r, pid, pages[1], 5).unwrap();
                recovered = Some((pid, r.now(), data));
            }
            AppEvent::Signal(Signal::GroupFailureNotice { about, failure, .. }) => {
                notice = Some((about, failure, r.now()));
            }
            _ => {}
        };
        r.inject_at(us(20), Injection::CrashCompute { compute: ComputeId(0) });
        r.run_until(&mut app, us(200));
    }
    let (pid, at, data) = recovered.unwrap();
    assert_ne!(pid, p0);
    assert_eq!(data, b"state");
    assert_eq!(r.compute_of(pid), Some(ComputeId(1)));
    let bound = r.config().monitor.unwrap().detection_bound();
    assert!(at <= us(20) + bound + us(4), "recovered at {at}");
    let (about, failure, _) = notice.unwrap();
    assert_eq!(about, p0);
    assert_eq!(failure, FailureDescriptor::Compute { compute: ComputeId(0) });
    assert!(r.is_fenced(ComputeId(0)));
    r.mmu().check_invariants().unwrap();
}

#[test]
fn notify_group_reaches_every_contact_once() {
    let mut r = rack(2, 2);
    let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    let p1 = r.spawn(ComputeId(1), Origin::Initial { role: 1 }).unwrap();
    let p2 = r.spawn(ComputeId(2), Origin::Initial { role: 1 }).unwrap();
    let mut got = Vec::new();
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
            AppEvent::Started { .. } if pid == p0 => {
                r.sys_register_failure_group(pid, &[p1, p2]).unwrap();
                r.sys_register_failure_group(pid, &[p2]).unwrap();
                r.set_timer(pid, us(10), 0).unwrap();
            }
            AppEvent::Started { .. } => {
                r.sys_set_handler(pid, SignalKind::GroupFailureNotice, true).unwrap();
            }
            AppEvent::Timer { .. } => {
                let n = r.sys_notify_group(pid, FailureDescriptor::Memory { element: MemId(0) }).unwrap();
                assert_eq!(n, 2);
            }
            AppEvent::Signal(Signal::GroupFailureNotice { seq, .. }) => got.push((pid, seq, r.now())),
            _ => {}
        };
        r.run_until(&mut app, us(100));
    }
    got.sort();
    // same rack: half a ToR round trip; other rack: half the cross-rack one
    assert_eq!(got, vec![(p1, 1, us(11)), (p2, 1, SimTime::from_nanos(32_500))]);
}

#[test]
fn stalled_compute_defers_timers_and_drops_messages() {
    let mut r = rack(1, 2);
    let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    let p1 = r.spawn(ComputeId(1), Origin::Initial { role: 1 }).unwrap();
    let mut log = Vec::new();
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
            AppEvent::Started { .. } if pid == p0 => r.set_timer(pid, us(10), 1).unwrap(),
            AppEvent::Started { .. } => r.set_timer(pid, us(12), 2).unwrap(),
            AppEvent::Timer { token: 2 } => r.send(pid, p0, 7, 64).unwrap(),
            other => log.push((pid, r.now(), format!("{other:?}"))),
        };
        r.inject_at(us(5), Injection::StallCompute { compute: ComputeId(0), duration: us(20) });
        r.run_until(&mut app, us(100));
    }
    assert_eq!(log.len(), 2, "{log:?}");
    assert_eq!(log[0].1, us(25));
    assert!(log.iter().any(|l| l.2.contains("Timer")));
    assert!(log.iter().any(|l| l.2.contains("Resumed")));
    assert_eq!(r.stats().tor_dropped, 1);
    // a 20us stall outlasts the 12us heartbeat deadline, so the monitor
    // declares the element failed even though it comes back
    assert_eq!(r.trace().of_kind("detect").count(), 1);
    assert!(r.is_running(p0) && r.is_running(p1));
}

#[test]
fn silent_memory_failure_times_out_and_explicit_reports() {
    for mode in [FailureMode::Silent, FailureMode::Explicit] {
        let mut r = rack(1, 1);
        let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
        let mut outcome = None;
        {
            let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
                AppEvent::Started { .. } => {
                    r.sys_set_handler(pid, SignalKind::MemoryFault, true).unwrap();
                    let v = r.alloc_now(pid, 1, true).unwrap()[0];
                    r.set_timer(pid, us(10), v.number()).unwrap();
                }
                AppEvent::Timer { token } => {
                    let v = VirtualPage::new(pid, token).unwrap();
                    r.access(pid, v.base(), AccessOp::Read { len: 4 }).unwrap();
                }
                AppEvent::AccessDone { result, .. } => outcome = Some((r.now(), result)),
                _ => {}
            };
            r.inject_at(us(5), Injection::FailMemory { element: MemId(0), mode: Some(mode) });
            r.run_until(&mut app, us(100));
        }
        let (at, result) = outcome.unwrap();
        assert!(r.is_running(p0));
        match mode {
            FailureMode::Silent => {
                assert_eq!(result, Err(Fault::Timeout));
                assert_eq!(at, us(12) + us(10));
            }
            FailureMode::Explicit => {
                assert_eq!(result, Err(Fault::ElementError));
                assert_eq!(at, us(14));
            }
        }
    }
}

#[test]
fn unhandled_fault_ends_process() {
    let mut r = rack(1, 1);
    let p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| {
            if let AppEvent::Started { .. } = ev {
                let foreign = VirtualPage::new(ProcessId::new(40), 0).unwrap();
                assert!(r.access_now(pid, foreign.base(), AccessOp::Read { len: 1 }).is_err());
            }
        };
        r.run_until(&mut app, us(10));
    }
    assert!(!r.is_running(p0));
    assert_eq!(r.trace().of_kind("process_exit").count(), 1);
}

#[test]
fn failed_monitor_runs_no_handler() {
    let mut r = rack(1, 2);
    let _p0 = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
    let mut started = 0;
    {
        let mut app = |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| {
            if let AppEvent::Started { origin } = ev {
                started += 1;
                if matches!(origin, Origin::Initial { .. }) {
                    r.alloc_now(pid, 1, true).unwrap();
                    let h = FastFailureHandler {
                        steps: vec![
                            HandlerStep::RequestProvision { compute: ComputeId(1) },
                            HandlerStep::TriggerStealOnBehalf,
                        ],
                    };
                    r.register_fast_failure_handler(pid, h).unwrap();
                }
            }
        };
        r.inject_at(us(3), Injection::FailMonitor { rack: RackId(0) });
        r.inject_at(us(10), Injection::CrashCompute { compute: ComputeId(0) });
        r.run_until(&mut app, us(500));
    }
    assert_eq!(started, 1);
    assert_eq!(r.trace().of_kind("detect").count(), 0);
}

#[test]
fn identical_seeds_identical_traces() {
    fn run(seed: u64) -> String {
        let mut cfg = RackConfig::new(2, 2, 1, LatencyModel::profile(Profile::Current));
        cfg.latency.jitter_fraction = 0.5;
        cfg.seed = seed;
        let mut r: Rack<u32> = Rack::new(cfg).unwrap();
        let a = r.spawn(ComputeId(0), Origin::Initial { role: 0 }).unwrap();
        let b = r.spawn(ComputeId(3), Origin::Initial { role: 0 }).unwrap();
        let mut app = move |r: &mut Rack<u32>, pid: ProcessId, ev: AppEvent<u32>| match ev {
            AppEvent::Started { .. } => r.send(pid, if pid == a { b } else { a }, 0, 8).unwrap(),
            AppEvent::Net { from, msg } if msg < 50 => r.send(pid, from, msg + 1, 8).unwrap(),
            _ => {}
        };
        r.run_until(&mut app, us(3000));
        r.trace().to_jsonl()
    }
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

use std::time::Instant;

use ddc_sim::mmu::InjectedBug;
use ddc_sim::primitives::{run_script, PrimitivesParams, Property};

#[test]
fn random_scripts_keep_every_invariant() {
    let params = PrimitivesParams::default();
    let t = Instant::now();
    let mut steps = 0;
    for seed in 0..1000 {
        let out = run_script(seed, &params, None);
        assert!(out.ok(), "seed {seed}: {:?}\nsteps: {:?}", out.violations, out.steps);
        steps += out.steps.len();
    }
    println!("1000 scripts, {steps} steps, {:?}", t.elapsed());
}

#[test]
fn planted_grant_bug_is_caught_and_replays() {
    let params = PrimitivesParams::default();
    let caught: Vec<u64> = (0..50).filter(|&s| !run_script(s, &params, Some(InjectedBug::GrantSkipsClear)).ok()).collect();
    assert!(!caught.is_empty());
    let s = caught[0];
    let out = run_script(s, &params, Some(InjectedBug::GrantSkipsClear));
    assert!(out.violates(Property::SingleOwner) || out.violates(Property::RevokeBeforeReassign), "{:?}", out.violations);
    assert_eq!(run_script(s, &params, Some(InjectedBug::GrantSkipsClear)), run_script(s, &params, Some(InjectedBug::GrantSkipsClear)));
    println!("caught on {} of 50 seeds, first: {}", caught.len(), out.violations[0]);
}

use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ddcsim_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ddc_last_error()) }.to_string_lossy().into_owned()
}

fn take(s: *mut c_char) -> String {
    let out = unsafe { CStr::from_ptr(s) }.to_string_lossy().into_owned();
    unsafe { ddc_string_free(s) };
    out
}

fn load(name: &str) -> *mut DdcScenario {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ddc_scenario_load(cstr(name).as_ptr(), &mut s) }, DdcStatus::DdcOk, "{}", last_error());
    s
}

#[test]
fn run_a_bundled_scenario() {
    let s = load("paxos_reincarnate");
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { ddc_run(s, &mut r) }, DdcStatus::DdcOk);
    assert_eq!(unsafe { ddc_run_passed(r) }, 1);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ddc_run_report_json(r, &mut json) }, DdcStatus::DdcOk);
    let v: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
    assert_eq!(v["metrics"]["runs"][0]["final_epoch"], 0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { ddc_run_write_trace(r, p.as_ptr()) }, DdcStatus::DdcOk);
    assert!(std::fs::read_to_string(&path).unwrap().lines().count() > 100);
    let bad = cstr("/nonexistent/dir/trace.jsonl");
    assert_eq!(unsafe { ddc_run_write_trace(r, bad.as_ptr()) }, DdcStatus::DdcIo);
    unsafe {
        ddc_run_free(r);
        ddc_scenario_free(s);
    }
}

#[test]
fn errors_are_reported_by_code_and_message() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ddc_scenario_load(ptr::null(), &mut s) }, DdcStatus::DdcNullArg);
    assert_eq!(unsafe { ddc_scenario_load(cstr("x").as_ptr(), ptr::null_mut()) }, DdcStatus::DdcNullArg);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { ddc_scenario_from_toml(bad.as_ptr().cast(), &mut s) }, DdcStatus::DdcInvalidUtf8);
    let text = cstr("name = \"x\"\n[workload]\nkind = \"paxos\"\nreplicas = 3\n");
    assert_eq!(unsafe { ddc_scenario_from_toml(text.as_ptr(), &mut s) }, DdcStatus::DdcConfig);
    assert!(last_error().contains("workload.replicas"), "{}", last_error());
    assert!(s.is_null());

    let s = load("primitives_fuzz");
    assert_eq!(unsafe { ddc_scenario_set_profile(s, cstr("mars").as_ptr()) }, DdcStatus::DdcConfig);
    assert_eq!(unsafe { ddc_scenario_set_profile(s, cstr("future").as_ptr()) }, DdcStatus::DdcOk);
    assert_eq!(last_error(), "");
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ddc_crash_sweep(s, &mut json) }, DdcStatus::DdcConfig);
    unsafe { ddc_scenario_free(s) };
    unsafe { ddc_scenario_free(ptr::null_mut()) };
    unsafe { ddc_run_free(ptr::null_mut()) };
    assert_eq!(unsafe { ddc_run_passed(ptr::null()) }, 0);
}

#[test]
fn fuzz_reports_the_failing_seed() {
    let text = cstr("name = \"planted\"\n[workload]\nkind = \"primitive-script\"\nplanted_bug = \"grant-skips-clear\"\n");
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ddc_scenario_from_toml(text.as_ptr(), &mut s) }, DdcStatus::DdcOk);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ddc_fuzz(s, 5, &mut json) }, DdcStatus::DdcInvariant);
    let v: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
    let seed = v["failures"][0]["seed"].as_u64().unwrap();

    assert_eq!(unsafe { ddc_scenario_set_seed(s, seed) }, DdcStatus::DdcOk);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { ddc_run(s, &mut r) }, DdcStatus::DdcInvariant);
    assert_eq!(unsafe { ddc_run_passed(r) }, 0);
    unsafe {
        ddc_run_free(r);
        ddc_scenario_free(s);
    }

    let s = load("heap_crash_sweep");
    assert_eq!(unsafe { ddc_fuzz(s, 0, &mut json) }, DdcStatus::DdcOk);
    assert!(take(json).contains("\"runs\": 0"));
    assert_eq!(unsafe { ddc_crash_sweep(s, &mut json) }, DdcStatus::DdcOk);
    assert!(take(json).contains("committed-prefix-recovery"));
    unsafe { ddc_scenario_free(s) };
}

/// Compiles a C program against the generated header and the static
/// library, and runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libddcsim_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

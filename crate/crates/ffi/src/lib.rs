//! C ABI over the scenario runner.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every call returns a [`DdcStatus`]; on any
//! status other than `DDC_OK`, `ddc_last_error` describes what went wrong.
//! Strings returned by the library are freed with `ddc_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ddc_sim::latency::Profile;
use ddc_sim::runner::{self, Overrides, RunOutput};
use ddc_sim::scenario::{ConfigError, ScenarioConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdcStatus {
    DdcOk = 0,
    DdcNullArg = 1,
    DdcInvalidUtf8 = 2,
    DdcConfig = 3,
    /// The run completed and some invariant check failed.
    DdcInvariant = 4,
    DdcPanic = 5,
    DdcIo = 6,
}

/// A parsed scenario.
pub struct DdcScenario {
    config: ScenarioConfig,
}

/// The outcome of one run: report and traces.
pub struct DdcRun {
    output: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(DdcStatus, String);

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail(DdcStatus::DdcConfig, e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Result<DdcStatus, Fail>) -> DdcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            if s == DdcStatus::DdcOk {
                set_error("");
            }
            s
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            DdcStatus::DdcPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(DdcStatus::DdcNullArg, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(DdcStatus::DdcInvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(DdcStatus::DdcNullArg, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(DdcStatus::DdcNullArg, format!("{name} is null")));
    }
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ddc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a scenario file, or a bundled scenario by name.
///
/// # Safety
/// `name_or_path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_scenario_load(name_or_path: *const c_char, out: *mut *mut DdcScenario) -> DdcStatus {
    guard(|| {
        out_arg(out, "out")?;
        let name = str_arg(name_or_path, "name_or_path")?;
        let config = ScenarioConfig::resolve(name)?;
        *out = Box::into_raw(Box::new(DdcScenario { config }));
        Ok(DdcStatus::DdcOk)
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_scenario_from_toml(text: *const c_char, out: *mut *mut DdcScenario) -> DdcStatus {
    guard(|| {
        out_arg(out, "out")?;
        let config = ScenarioConfig::from_toml(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(DdcScenario { config }));
        Ok(DdcStatus::DdcOk)
    })
}

/// # Safety
/// `scenario` must come from this library and not be freed.
#[no_mangle]
pub unsafe extern "C" fn ddc_scenario_set_seed(scenario: *mut DdcScenario, seed: u64) -> DdcStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| Fail(DdcStatus::DdcNullArg, "scenario is null".into()))?;
        s.config.seed = seed;
        Ok(DdcStatus::DdcOk)
    })
}

/// Switches to `"current"`, `"future"` or `"cloud"` latencies.
///
/// # Safety
/// `scenario` must come from this library; `profile` must be a
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ddc_scenario_set_profile(scenario: *mut DdcScenario, profile: *const c_char) -> DdcStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| Fail(DdcStatus::DdcNullArg, "scenario is null".into()))?;
        let p = match str_arg(profile, "profile")? {
            "current" => Profile::Current,
            "future" => Profile::Future,
            "cloud" => Profile::Cloud,
            other => return Err(Fail(DdcStatus::DdcConfig, format!("invalid `profile`: unknown profile {other}"))),
        };
        s.config.set_profile(p);
        Ok(DdcStatus::DdcOk)
    })
}

/// # Safety
/// `scenario` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ddc_scenario_free(scenario: *mut DdcScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs the scenario. On `DDC_OK` or `DDC_INVARIANT` a run handle is
/// written to `out`.
///
/// # Safety
/// `scenario` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_run(scenario: *const DdcScenario, out: *mut *mut DdcRun) -> DdcStatus {
    guard(|| {
        out_arg(out, "out")?;
        let s = ref_arg(scenario, "scenario")?;
        let output = runner::run(&s.config)?;
        let passed = output.report.passed();
        *out = Box::into_raw(Box::new(DdcRun { output }));
        if passed {
            Ok(DdcStatus::DdcOk)
        } else {
            Err(Fail(DdcStatus::DdcInvariant, "an invariant check failed".into()))
        }
    })
}

/// 1 if every invariant check passed, 0 if not or if `run` is null.
///
/// # Safety
/// `run` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ddc_run_passed(run: *const DdcRun) -> i32 {
    run.as_ref().map_or(0, |r| i32::from(r.output.report.passed()))
}

/// The report as JSON.
///
/// # Safety
/// `run` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_run_report_json(run: *const DdcRun, out: *mut *mut c_char) -> DdcStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = c_string(ref_arg(run, "run")?.output.report.to_json());
        Ok(DdcStatus::DdcOk)
    })
}

/// Writes the run's traces as JSON lines to `path`.
///
/// # Safety
/// `run` must come from this library; `path` must be a nul-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn ddc_run_write_trace(run: *mut DdcRun, path: *const c_char) -> DdcStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| Fail(DdcStatus::DdcNullArg, "run is null".into()))?;
        let path = str_arg(path, "path")?;
        r.output.save_traces(Path::new(path)).map_err(|e| Fail(DdcStatus::DdcIo, format!("{path}: {e}")))?;
        Ok(DdcStatus::DdcOk)
    })
}

/// # Safety
/// `run` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn ddc_run_free(run: *mut DdcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs `seeds` consecutive seeds from the scenario's own and writes the
/// aggregate report as JSON. `DDC_INVARIANT` if any seed failed a check.
///
/// # Safety
/// `scenario` must come from this library; `report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_fuzz(scenario: *const DdcScenario, seeds: u64, report_json: *mut *mut c_char) -> DdcStatus {
    guard(|| {
        out_arg(report_json, "report_json")?;
        let s = ref_arg(scenario, "scenario")?;
        let n = usize::try_from(seeds).map_err(|_| Fail(DdcStatus::DdcConfig, "invalid `seeds`: too many".into()))?;
        let rep = runner::fuzz(&s.config, n, Overrides::default())?;
        *report_json = c_string(serde_json::to_string_pretty(&rep).expect("report serializes"));
        match rep.reproducing_seed() {
            None => Ok(DdcStatus::DdcOk),
            Some(seed) => Err(Fail(DdcStatus::DdcInvariant, format!("seed {seed} failed a check"))),
        }
    })
}

/// Crash sweep of a heap workload; the report is written as JSON.
///
/// # Safety
/// `scenario` must come from this library; `report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddc_crash_sweep(scenario: *const DdcScenario, report_json: *mut *mut c_char) -> DdcStatus {
    guard(|| {
        out_arg(report_json, "report_json")?;
        let s = ref_arg(scenario, "scenario")?;
        let rep = runner::crash_sweep(&s.config)?;
        *report_json = c_string(rep.to_json());
        if rep.passed() {
            Ok(DdcStatus::DdcOk)
        } else {
            Err(Fail(DdcStatus::DdcInvariant, "a crash point did not recover".into()))
        }
    })
}

/// # Safety
/// `s` must be a string returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn ddc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

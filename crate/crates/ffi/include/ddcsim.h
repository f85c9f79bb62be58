#ifndef DDCSIM_H
#define DDCSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdcStatus {
  DDC_OK = 0,
  DDC_NULL_ARG = 1,
  DDC_INVALID_UTF8 = 2,
  DDC_CONFIG = 3,
  /*
   The run completed and some invariant check failed.
   */
  DDC_INVARIANT = 4,
  DDC_PANIC = 5,
  DDC_IO = 6,
} DdcStatus;

/*
 The outcome of one run: report and traces.
 */
typedef struct DdcRun DdcRun;

/*
 A parsed scenario.
 */
typedef struct DdcScenario DdcScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next call into the library on the same thread.
 */
const char *ddc_last_error(void);

/*
 Loads a scenario file, or a bundled scenario by name.

 # Safety
 `name_or_path` must be a nul-terminated string; `out` must be writable.
 */
enum DdcStatus ddc_scenario_load(const char *name_or_path, struct DdcScenario **out);

/*
 Parses a scenario from TOML text.

 # Safety
 `text` must be a nul-terminated string; `out` must be writable.
 */
enum DdcStatus ddc_scenario_from_toml(const char *text, struct DdcScenario **out);

/*
 # Safety
 `scenario` must come from this library and not be freed.
 */
enum DdcStatus ddc_scenario_set_seed(struct DdcScenario *scenario, uint64_t seed);

/*
 Switches to `"current"`, `"future"` or `"cloud"` latencies.

 # Safety
 `scenario` must come from this library; `profile` must be a
 nul-terminated string.
 */
enum DdcStatus ddc_scenario_set_profile(struct DdcScenario *scenario, const char *profile);

/*
 # Safety
 `scenario` must come from this library, or be null.
 */
void ddc_scenario_free(struct DdcScenario *scenario);

/*
 Runs the scenario. On `DDC_OK` or `DDC_INVARIANT` a run handle is
 written to `out`.

 # Safety
 `scenario` must come from this library; `out` must be writable.
 */
enum DdcStatus ddc_run(const struct DdcScenario *scenario, struct DdcRun **out);

/*
 1 if every invariant check passed, 0 if not or if `run` is null.

 # Safety
 `run` must come from this library, or be null.
 */
int32_t ddc_run_passed(const struct DdcRun *run);

/*
 The report as JSON.

 # Safety
 `run` must come from this library; `out` must be writable.
 */
enum DdcStatus ddc_run_report_json(const struct DdcRun *run, char **out);

/*
 Writes the run's traces as JSON lines to `path`.

 # Safety
 `run` must come from this library; `path` must be a nul-terminated
 string.
 */
enum DdcStatus ddc_run_write_trace(struct DdcRun *run, const char *path);

/*
 # Safety
 `run` must come from this library, or be null.
 */
void ddc_run_free(struct DdcRun *run);

/*
 Runs `seeds` consecutive seeds from the scenario's own and writes the
 aggregate report as JSON. `DDC_INVARIANT` if any seed failed a check.

 # Safety
 `scenario` must come from this library; `report_json` must be writable.
 */
enum DdcStatus ddc_fuzz(const struct DdcScenario *scenario, uint64_t seeds, char **report_json);

/*
 Crash sweep of a heap workload; the report is written as JSON.

 # Safety
 `scenario` must come from this library; `report_json` must be writable.
 */
enum DdcStatus ddc_crash_sweep(const struct DdcScenario *scenario, char **report_json);

/*
 # Safety
 `s` must be a string returned by this library, or null.
 */
void ddc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDCSIM_H */

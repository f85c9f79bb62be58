#include <stdio.h>
#include <string.h>

#include "ddcsim.h"

int main(void) {
    DdcScenario *s = NULL;
    if (ddc_scenario_load("shuffle_3rtt_vs_grant", &s) != DDC_OK) {
        fprintf(stderr, "load: %s\n", ddc_last_error());
        return 1;
    }
    DdcRun *r = NULL;
    if (ddc_run(s, &r) != DDC_OK) {
        fprintf(stderr, "run: %s\n", ddc_last_error());
        return 1;
    }
    char *json = NULL;
    if (ddc_run_report_json(r, &json) != DDC_OK || strstr(json, "\"speedup\": 3.0") == NULL) {
        fprintf(stderr, "report: %s\n", json ? json : ddc_last_error());
        return 1;
    }
    ddc_string_free(json);
    ddc_run_free(r);
    ddc_scenario_free(s);

    if (ddc_scenario_load(NULL, &s) != DDC_NULL_ARG) {
        return 1;
    }
    if (ddc_scenario_from_toml("name = 1", &s) != DDC_CONFIG || strlen(ddc_last_error()) == 0) {
        return 1;
    }
    puts("ok");
    return 0;
}

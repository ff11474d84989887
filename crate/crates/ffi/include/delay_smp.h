#ifndef DELAY_SMP_H
#define DELAY_SMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `Numerical` and `Config` match the CLI exit codes.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NUMERICAL = 1,
  DS_STATUS_CONFIG = 2,
  DS_STATUS_NULL_ARGUMENT = 3,
  DS_STATUS_INVALID_UTF8 = 4,
  DS_STATUS_IO = 5,
  DS_STATUS_LENGTH_MISMATCH = 6,
  DS_STATUS_PANIC = 7,
} DsStatus;

/**
 * Parsed and validated experiment configuration.
 */
typedef struct DsConfig DsConfig;

/**
 * Control problem built from a configuration, with its noise ensemble.
 */
typedef struct DsProblem DsProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *ds_last_error(void);

/**
 * Library version as a static string.
 */
const char *ds_version(void);

/**
 * Number of registered scenarios.
 */
size_t ds_scenario_count(void);

/**
 * Name of scenario `index` (static string), or null when out of range.
 */
const char *ds_scenario_name(size_t index);

/**
 * Parses a TOML configuration and applies `key=value` overrides.
 *
 * # Safety
 * `source` must be a NUL-terminated string, `overrides` an array of
 * `n_overrides` such strings (may be null when zero), `out` writable.
 */
enum DsStatus ds_config_from_toml(const char *source,
                                  const char *const *overrides,
                                  size_t n_overrides,
                                  struct DsConfig **out);

/**
 * Reads and parses a configuration file.
 *
 * # Safety
 * As for [`ds_config_from_toml`], with `path` a NUL-terminated path.
 */
enum DsStatus ds_config_from_path(const char *path,
                                  const char *const *overrides,
                                  size_t n_overrides,
                                  struct DsConfig **out);

/**
 * # Safety
 * `config` must come from this library and not be used afterwards.
 */
void ds_config_free(struct DsConfig *config);

/**
 * Copies the scenario name into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full name length excluding the terminator.
 *
 * # Safety
 * `config` must be valid; `buf` must hold `len` bytes or be null with `len = 0`.
 */
size_t ds_config_scenario(const struct DsConfig *config, char *buf, size_t len);

/**
 * Runs the configured scenario, writing its artifacts into `out_dir`.
 *
 * # Safety
 * `config` must be valid and `out_dir` a NUL-terminated path.
 */
enum DsStatus ds_run(const struct DsConfig *config, const char *out_dir);

/**
 * Builds the control problem and its noise ensemble from a configuration.
 *
 * # Safety
 * `config` must be valid and `out` writable.
 */
enum DsStatus ds_problem_new(const struct DsConfig *config, struct DsProblem **out);

/**
 * # Safety
 * `problem` must come from this library and not be used afterwards.
 */
void ds_problem_free(struct DsProblem *problem);

/**
 * Number of control intervals `K`.
 *
 * # Safety
 * `problem` must be valid or null.
 */
size_t ds_problem_steps(const struct DsProblem *problem);

/**
 * Values per control interval.
 *
 * # Safety
 * `problem` must be valid or null.
 */
size_t ds_problem_control_dim(const struct DsProblem *problem);

/**
 * Time step of the problem grid.
 *
 * # Safety
 * `problem` must be valid or null.
 */
double ds_problem_dt(const struct DsProblem *problem);

/**
 * Monte Carlo cost of the control `u` (row-major, `steps * dim` values).
 *
 * # Safety
 * `problem` valid, `u` readable for `len` values, `mean` and `stderr_out` writable.
 */
enum DsStatus ds_cost(const struct DsProblem *problem,
                      const double *u,
                      size_t len,
                      double *mean,
                      double *stderr_out);

/**
 * Expected Hamiltonian gradient `E D_uH(t_n)` at `u`, written to `grad`
 * (same layout and length as `u`).
 *
 * # Safety
 * `problem` valid, `u` readable and `grad` writable for `len` values.
 */
enum DsStatus ds_gradient(const struct DsProblem *problem,
                          const double *u,
                          size_t len,
                          double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELAY_SMP_H */

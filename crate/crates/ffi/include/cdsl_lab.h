#ifndef CDSL_LAB_H
#define CDSL_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CDSL_STATUS_OK = 0,
  CDSL_STATUS_NULL_ARGUMENT = 1,
  CDSL_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or input.
   */
  CDSL_STATUS_CONFIG = 3,
  /**
   * The computation failed.
   */
  CDSL_STATUS_RUNTIME = 4,
  CDSL_STATUS_OUT_OF_RANGE = 5,
  /**
   * The requested metric is undefined, e.g. TDG of the first domain.
   */
  CDSL_STATUS_ABSENT = 6,
  CDSL_STATUS_PANIC = 7,
} CdslStatus;

typedef enum {
  CDSL_METRIC_TDG = 0,
  CDSL_METRIC_TDA = 1,
  CDSL_METRIC_FA = 2,
} CdslMetric;

/**
 * Opaque run configuration.
 */
typedef struct CdslConfig CdslConfig;

/**
 * Opaque result of a run.
 */
typedef struct CdslResult CdslResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *cdsl_last_error(void);

/**
 * Library version as a static string.
 */
const char *cdsl_version(void);

/**
 * Creates a configuration holding the defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
CdslStatus cdsl_config_default(CdslConfig **out);

/**
 * Parses a configuration document, TOML unless `json` is nonzero. Keys that
 * are absent keep their defaults; unknown keys are rejected.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` valid for writing.
 */
CdslStatus cdsl_config_parse(const char *text, int32_t json, CdslConfig **out);

/**
 * Applies one `key=value` override; dotted keys reach nested tables.
 *
 * # Safety
 * `cfg` must come from this library and `item` must be NUL-terminated.
 */
CdslStatus cdsl_config_set(CdslConfig *cfg, const char *item);

/**
 * Checks the configuration without running it.
 *
 * # Safety
 * `cfg` must come from this library.
 */
CdslStatus cdsl_config_validate(const CdslConfig *cfg);

/**
 * Serializes the full configuration as JSON. Free the string with
 * [`cdsl_string_free`].
 *
 * # Safety
 * `cfg` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_config_to_json(const CdslConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must come from this library or be null; it is invalid afterwards.
 */
void cdsl_config_free(CdslConfig *cfg);

/**
 * # Safety
 * `s` must be a string returned by this library or null.
 */
void cdsl_string_free(char *s);

/**
 * Runs the continual protocol, or the stationary mode when the
 * configuration sets `stationary`.
 *
 * # Safety
 * `cfg` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_run(const CdslConfig *cfg, CdslResult **out);

/**
 * Adapts from the first to the second domain of the configured sequence
 * without memory or distillation. The sequence must have exactly two
 * domains.
 *
 * # Safety
 * `cfg` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_run_stationary(const CdslConfig *cfg, CdslResult **out);

/**
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_domain_count(const CdslResult *res, size_t *out);

/**
 * Number of matrix rows, one per training stage.
 *
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_stage_count(const CdslResult *res, size_t *out);

/**
 * Accuracy on `domain` after training stage `stage`.
 *
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_matrix_get(const CdslResult *res, size_t stage, size_t domain, double *out);

/**
 * Per-domain metric. Returns `Absent` when the metric has no samples, as
 * for TDG of the first domain or FA of the last.
 *
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_metric(const CdslResult *res, CdslMetric metric, size_t domain, double *out);

/**
 * Average of a metric over the domains where it is defined.
 *
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_average(const CdslResult *res, CdslMetric metric, double *out);

/**
 * Target accuracy of a stationary run; `Absent` for continual runs.
 *
 * # Safety
 * `res` must come from this library and `out` be valid for writing.
 */
CdslStatus cdsl_result_stationary_accuracy(const CdslResult *res, double *out);

/**
 * Writes the results directory layout (matrix, metrics, log, resolved
 * config) under `dir`.
 *
 * # Safety
 * `res` must come from this library and `dir` must be NUL-terminated.
 */
CdslStatus cdsl_result_write(const CdslResult *res, const char *dir);

/**
 * # Safety
 * `res` must come from this library or be null; it is invalid afterwards.
 */
void cdsl_result_free(CdslResult *res);

/**
 * Metrics of an `n`×`n` row-major accuracy matrix. Each output array has
 * `n` entries; undefined entries (TDG of domain 0, FA of domain n-1) are
 * written as NaN.
 *
 * # Safety
 * `matrix` must hold `n*n` values and each output array `n` writable values.
 */
CdslStatus cdsl_compute_metrics(const double *matrix,
                                size_t n,
                                double *tdg,
                                double *tda,
                                double *fa);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDSL_LAB_H */

#ifndef JUMPEST_H
#define JUMPEST_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum JeStatus {
  JE_STATUS_OK = 0,
  JE_STATUS_NULL_POINTER = 1,
  JE_STATUS_INVALID_ARGUMENT = 2,
  JE_STATUS_CONFIG = 3,
  JE_STATUS_DATA = 4,
  JE_STATUS_NUMERICAL = 5,
  JE_STATUS_NOT_AVAILABLE = 6,
  JE_STATUS_BUFFER_TOO_SMALL = 7,
  JE_STATUS_IO = 8,
  JE_STATUS_PANIC = 9,
} JeStatus;

/**
 * Outcome of an estimation run.
 */
typedef struct JeEstimate JeEstimate;

/**
 * A model together with its simulation, solver and quadrature settings.
 */
typedef struct JeModel JeModel;

/**
 * A discretely observed path on a uniform grid.
 */
typedef struct JePath JePath;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *je_version(void);

/**
 * Message of the last failure on this thread, or null if none.
 */
const char *je_last_error_message(void);

/**
 * Built-in model by name (`ou_additive_jumps`, `quadratic_ef_model`,
 * `driftjump_known_diffusion`) with default settings.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum JeStatus je_model_new_builtin(const char *name, struct JeModel **out);

/**
 * Model from a JSON configuration document, as accepted by the CLI.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum JeStatus je_model_from_json(const char *json, struct JeModel **out);

/**
 * Parameter dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t je_model_dim(const struct JeModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void je_model_free(struct JeModel *model);

/**
 * Simulates `n` steps of size `delta` at `theta` (length `je_model_dim`).
 * Substeps, burn-in and start point come from the model configuration.
 *
 * # Safety
 * Pointers must be valid; `theta` must hold `theta_len` values.
 */
enum JeStatus je_simulate(const struct JeModel *model,
                          const double *theta,
                          size_t theta_len,
                          size_t n,
                          double delta,
                          uint64_t seed,
                          struct JePath **out);

/**
 * Wraps caller-supplied observations `x_0, …, x_{len-1}` spaced `delta` apart.
 *
 * # Safety
 * `values` must hold `len` values; `out` must be valid.
 */
enum JeStatus je_path_from_values(const double *values,
                                  size_t len,
                                  double delta,
                                  struct JePath **out);

/**
 * Number of stored observations (`n + 1`), or 0 for a null handle.
 *
 * # Safety
 * `path` must be null or a live handle.
 */
size_t je_path_len(const struct JePath *path);

/**
 * Sampling interval, or NaN for a null handle.
 *
 * # Safety
 * `path` must be null or a live handle.
 */
double je_path_delta(const struct JePath *path);

/**
 * Copies the observations into `buf`, which must hold `je_path_len` values.
 *
 * # Safety
 * `buf` must be writable for `cap` values.
 */
enum JeStatus je_path_values(const struct JePath *path, double *buf, size_t cap);

/**
 * # Safety
 * `path` must be null or a handle not yet freed.
 */
void je_path_free(struct JePath *path);

/**
 * Multi-start root search for the named estimating function. A null `ef`
 * uses the one in the model configuration.
 *
 * # Safety
 * Handles must be live; `ef` must be null or NUL-terminated.
 */
enum JeStatus je_estimate(const struct JeModel *model,
                          const struct JePath *path,
                          const char *ef,
                          struct JeEstimate **out);

/**
 * Dimension of θ̂, or 0 for a null handle.
 *
 * # Safety
 * `est` must be null or a live handle.
 */
size_t je_estimate_dim(const struct JeEstimate *est);

/**
 * 1 if Newton converged, 0 otherwise or for a null handle.
 *
 * # Safety
 * `est` must be null or a live handle.
 */
int32_t je_estimate_converged(const struct JeEstimate *est);

/**
 * Copies θ̂ into `buf`.
 *
 * # Safety
 * `buf` must be writable for `cap` values.
 */
enum JeStatus je_estimate_theta(const struct JeEstimate *est, double *buf, size_t cap);

/**
 * Copies the standard errors into `buf`; `NotAvailable` when no variance
 * could be formed.
 *
 * # Safety
 * `buf` must be writable for `cap` values.
 */
enum JeStatus je_estimate_std_errors(const struct JeEstimate *est, double *buf, size_t cap);

/**
 * # Safety
 * `est` must be null or a handle not yet freed.
 */
void je_estimate_free(struct JeEstimate *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JUMPEST_H */

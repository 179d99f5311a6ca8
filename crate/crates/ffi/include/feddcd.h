#ifndef FEDDCD_H
#define FEDDCD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum FeddcdStatus {
  FEDDCD_STATUS_OK = 0,
  FEDDCD_STATUS_NULL_POINTER = 1,
  FEDDCD_STATUS_INVALID_ARGUMENT = 2,
  FEDDCD_STATUS_CONFIG = 3,
  FEDDCD_STATUS_NUMERICAL = 4,
  FEDDCD_STATUS_VERIFICATION_FAILED = 5,
  FEDDCD_STATUS_PANIC = 6,
} FeddcdStatus;

/**
 * Opaque federated problem.
 */
typedef struct FeddcdProblem FeddcdProblem;

/**
 * Opaque running simulation. Owns a copy of its problem.
 */
typedef struct FeddcdSimulation FeddcdSimulation;

/**
 * Metrics of one simulated round. Optional metrics are NaN when absent.
 */
typedef struct FeddcdRoundMetrics {
  size_t round;
  double dual_gap;
  double primal_gap;
  size_t local_steps;
  size_t communications;
} FeddcdRoundMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next call
 * into this library from the same thread.
 */
const char *feddcd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *feddcd_version(void);

/**
 * Adjusted update directions for `n_participants` uploaded models.
 *
 * `models` is row-major `n_participants x dim`, `lambdas` holds one scaling
 * weight per participant, `out` receives `n_participants x dim` values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must not alias the inputs.
 */
enum FeddcdStatus feddcd_adjust_directions(size_t n_participants,
                                           size_t dim,
                                           const double *models,
                                           const double *lambdas,
                                           double *out);

/**
 * Quadratic clients `f_i(w) = (p_i/2)||w||^2 - <q_i, w>`; `q` is row-major `n x dim`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum FeddcdStatus feddcd_problem_quadratic(size_t n,
                                           size_t dim,
                                           const double *p,
                                           const double *q,
                                           struct FeddcdProblem **out);

/**
 * # Safety
 * `problem` must be null or a handle from this library, not yet freed.
 */
void feddcd_problem_free(struct FeddcdProblem *problem);

/**
 * Number of clients and model dimension of a problem.
 *
 * # Safety
 * `problem` must be a live handle; outputs must be writable.
 */
enum FeddcdStatus feddcd_problem_shape(const struct FeddcdProblem *problem,
                                       size_t *n_clients,
                                       size_t *dim);

/**
 * Starts a simulation. `config_json` holds `SimConfig` keys (null or `{}`
 * for defaults); `n_clients` must match the problem.
 *
 * # Safety
 * `problem` must be a live handle, `config_json` null or NUL-terminated,
 * `out` writable.
 */
enum FeddcdStatus feddcd_simulation_new(const struct FeddcdProblem *problem,
                                        const char *config_json,
                                        struct FeddcdSimulation **out);

/**
 * Metrics of the current state without advancing.
 *
 * # Safety
 * `sim` must be a live handle; `out` writable.
 */
enum FeddcdStatus feddcd_simulation_metrics(struct FeddcdSimulation *sim,
                                            struct FeddcdRoundMetrics *out);

/**
 * Advances one round and reports its metrics.
 *
 * # Safety
 * `sim` must be a live handle; `out` null or writable.
 */
enum FeddcdStatus feddcd_simulation_step(struct FeddcdSimulation *sim,
                                         struct FeddcdRoundMetrics *out);

/**
 * Copies the reported primal model into `out` (length `dim`).
 *
 * # Safety
 * `sim` must be a live handle; `out` valid for `dim` writes.
 */
enum FeddcdStatus feddcd_simulation_model(const struct FeddcdSimulation *sim,
                                          double *out,
                                          size_t dim);

/**
 * # Safety
 * `sim` must be null or a handle from this library, not yet freed.
 */
void feddcd_simulation_free(struct FeddcdSimulation *sim);

/**
 * Runs the lemma suite on `instances` random instances of size `n` at
 * participation `tau` (every `2..=n` when `tau` is 0). Writes the number of
 * failed checks to `failures`; returns `VerificationFailed` when nonzero,
 * with the first failing lemma id in the last error.
 *
 * # Safety
 * `failures` must be null or writable.
 */
enum FeddcdStatus feddcd_verify_lemmas(size_t n,
                                       size_t tau,
                                       size_t instances,
                                       uint64_t seed,
                                       size_t *failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDDCD_H */

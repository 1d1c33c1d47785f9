#ifndef INTERTWINE_H
#define INTERTWINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IntertwineStatus {
  INTERTWINE_STATUS_OK = 0,
  INTERTWINE_STATUS_NULL_POINTER = 1,
  INTERTWINE_STATUS_INVALID_UTF8 = 2,
  INTERTWINE_STATUS_PARSE = 3,
  INTERTWINE_STATUS_DOMAIN = 4,
  INTERTWINE_STATUS_NUMERIC = 5,
  INTERTWINE_STATUS_CONFIG = 6,
  INTERTWINE_STATUS_TWIST_SINGULAR = 7,
  INTERTWINE_STATUS_MODE = 8,
  INTERTWINE_STATUS_DEGENERATE = 9,
  INTERTWINE_STATUS_PRECONDITION = 10,
  INTERTWINE_STATUS_IO = 11,
  INTERTWINE_STATUS_PANIC = 12,
} IntertwineStatus;

typedef enum IntertwineMode {
  INTERTWINE_MODE_PLAIN = 0,
  INTERTWINE_MODE_TILDE = 1,
} IntertwineMode;

/**
 * Opaque model handle.
 */
typedef struct IntertwineModel IntertwineModel;

/**
 * Opaque twist handle.
 */
typedef struct IntertwineTwist IntertwineTwist;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *intertwine_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *intertwine_last_error(void);

/**
 * Model on Euclidean space of dimension `dim` with potential `potential`
 * and a scan grid given by `lower`, `upper` and `points`, each of length `dim`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `potential` is NUL-terminated.
 */
enum IntertwineStatus intertwine_model_euclidean(size_t dim,
                                                 const char *potential,
                                                 const double *lower,
                                                 const double *upper,
                                                 const size_t *points,
                                                 struct IntertwineModel **out);

/**
 * Model described by the `[model]` table of a run configuration.
 *
 * # Safety
 * `config_toml` is a NUL-terminated string; `out` is writable.
 */
enum IntertwineStatus intertwine_model_from_config(const char *config_toml,
                                                   struct IntertwineModel **out);

/**
 * # Safety
 * `model` is null or a handle from this library not yet freed.
 */
void intertwine_model_free(struct IntertwineModel *model);

/**
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum IntertwineStatus intertwine_model_dim(const struct IntertwineModel *model, size_t *out);

/**
 * Infimum over the model region of the smallest Bakry–Émery eigenvalue.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum IntertwineStatus intertwine_rho_inf(const struct IntertwineModel *model, double *out);

/**
 * Smallest eigenvalue of the Bakry–Émery tensor at `x` (length = model dim).
 *
 * # Safety
 * `model` is a live handle; `x` holds `dim` values; `out` is writable.
 */
enum IntertwineStatus intertwine_bakry_emery_min(const struct IntertwineModel *model,
                                                 const double *x,
                                                 size_t dim,
                                                 double *out);

/**
 * Discrete spectral gap λ₁ on a grid over the given box.
 *
 * # Safety
 * `model` is a live handle; arrays hold `dim` entries; `out` is writable.
 */
enum IntertwineStatus intertwine_spectral_gap(const struct IntertwineModel *model,
                                              const double *lower,
                                              const double *upper,
                                              const size_t *points,
                                              size_t dim,
                                              double *out);

/**
 * Identity twist of dimension `dim`.
 *
 * # Safety
 * `out` is writable.
 */
enum IntertwineStatus intertwine_twist_identity(size_t dim, struct IntertwineTwist **out);

/**
 * Scalar twist `B* = λ(x)·id` with parameters `p0, p1, …` bound to `params`.
 *
 * # Safety
 * `lambda` is NUL-terminated; `params` holds `n_params` values; `out` is writable.
 */
enum IntertwineStatus intertwine_twist_scalar(size_t dim,
                                              const char *lambda,
                                              const double *params,
                                              size_t n_params,
                                              struct IntertwineTwist **out);

/**
 * Twist from the JSON form of a `TwistSpec`, e.g.
 * `{"family":{"family":"shear","expr":"x"},"parameters":[],"condition_bound":1e8}`.
 *
 * # Safety
 * `json` is NUL-terminated; `out` is writable.
 */
enum IntertwineStatus intertwine_twist_from_json(size_t dim,
                                                 const char *json,
                                                 struct IntertwineTwist **out);

/**
 * # Safety
 * `twist` is null or a handle from this library not yet freed.
 */
void intertwine_twist_free(struct IntertwineTwist *twist);

/**
 * Certified bound `ρ_B` (plain) or `ρ̃_B` (tilde) over the model region.
 * A plain-mode twist with nonzero defect yields `INTERTWINE_STATUS_MODE`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum IntertwineStatus intertwine_bound(const struct IntertwineModel *model,
                                       const struct IntertwineTwist *twist,
                                       enum IntertwineMode mode,
                                       double *out);

/**
 * Runs a full TOML configuration and returns the JSON report through
 * `report_json`, to be released with [`intertwine_string_free`]. The exit
 * code the command-line tool would use goes to `exit_code` when non-null.
 *
 * # Safety
 * `config_toml` is NUL-terminated; `report_json` is writable.
 */
enum IntertwineStatus intertwine_run_config(const char *config_toml,
                                            char **report_json,
                                            int32_t *exit_code);

/**
 * # Safety
 * `s` is null or a string returned by this library not yet freed.
 */
void intertwine_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERTWINE_H */

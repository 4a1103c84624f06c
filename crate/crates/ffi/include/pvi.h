#ifndef PVI_H
#define PVI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PviStatus {
  PVI_STATUS_OK = 0,
  PVI_STATUS_NULL_POINTER = 1,
  PVI_STATUS_INVALID_ARGUMENT = 2,
  PVI_STATUS_CONFIG = 3,
  PVI_STATUS_DIVERGENCE = 4,
  PVI_STATUS_IO = 5,
  PVI_STATUS_DATA = 6,
  PVI_STATUS_BUFFER_SIZE = 7,
  PVI_STATUS_PANIC = 8,
} PviStatus;

/**
 * Opaque handle returned by the session constructors.
 */
typedef struct PviSession PviSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a session from a TOML run configuration file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PviStatus pvi_session_from_file(const char *path, struct PviSession **out);

/**
 * Creates a session from TOML text.
 *
 * # Safety
 * `toml` must be a nul-terminated UTF-8 string and `out` a valid pointer.
 */
enum PviStatus pvi_session_from_toml(const char *toml, struct PviSession **out);

/**
 * Releases a session. Null is ignored.
 *
 * # Safety
 * `s` must come from a session constructor and not be used afterwards.
 */
void pvi_session_free(struct PviSession *s);

/**
 * Advances the flow by `n_steps` iterations. On divergence the session keeps
 * its last finite state.
 *
 * # Safety
 * `s` must be a live session.
 */
enum PviStatus pvi_session_step(struct PviSession *s, size_t n_steps);

/**
 * Advances the flow to the configured iteration count.
 *
 * # Safety
 * `s` must be a live session.
 */
enum PviStatus pvi_session_run(struct PviSession *s);

/**
 * Writes the iteration count, particle count and dimensions.
 *
 * # Safety
 * `s` must be a live session; each output pointer may be null.
 */
enum PviStatus pvi_session_dims(const struct PviSession *s,
                                size_t *iteration,
                                size_t *n_particles,
                                size_t *d_z,
                                size_t *d_x,
                                size_t *n_theta);

/**
 * Copies the particles, row-major `n_particles × d_z`.
 *
 * # Safety
 * `s` must be a live session and `buf` valid for `len` writes.
 */
enum PviStatus pvi_session_particles(const struct PviSession *s, double *buf, size_t len);

/**
 * Copies the kernel parameters.
 *
 * # Safety
 * `s` must be a live session and `buf` valid for `len` writes.
 */
enum PviStatus pvi_session_theta(const struct PviSession *s, double *buf, size_t len);

/**
 * Draws `n` points from the current approximation into `buf` (`n × d_x`).
 *
 * # Safety
 * `s` must be a live session and `buf` valid for `len` writes.
 */
enum PviStatus pvi_session_sample(const struct PviSession *s,
                                  uint64_t seed,
                                  size_t n,
                                  double *buf,
                                  size_t len);

/**
 * Log-density of the current approximation at `x` (`d_x` values).
 *
 * # Safety
 * `s` must be a live session, `x` valid for `len` reads and `out` writable.
 */
enum PviStatus pvi_session_log_density(const struct PviSession *s,
                                       const double *x,
                                       size_t len,
                                       double *out);

/**
 * Monte Carlo free energy of the current approximation with `n` samples.
 *
 * # Safety
 * `s` must be a live session and `out` writable.
 */
enum PviStatus pvi_session_free_energy(const struct PviSession *s,
                                       size_t n,
                                       uint64_t seed,
                                       double *out);

/**
 * Message of the last failing call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pvi_last_error(void);

/**
 * Static name of a status code.
 */
const char *pvi_status_name(enum PviStatus status);

/**
 * Library version as a static string.
 */
const char *pvi_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PVI_H */

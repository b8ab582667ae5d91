#ifndef HAWKES_ONLINE_H
#define HAWKES_ONLINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every function.
typedef enum HwkStatus {
  HWK_STATUS_OK = 0,
  // A required pointer argument was null.
  HWK_STATUS_NULL = 1,
  // Invalid parameters: kernel, step sizes, dimensions.
  HWK_STATUS_CONFIG = 2,
  // Invalid input events.
  HWK_STATUS_DATA = 3,
  // A non-finite loss or rate.
  HWK_STATUS_NUMERICAL = 4,
  // An internal panic was caught.
  HWK_STATUS_PANIC = 5,
} HwkStatus;

// Opaque network learner.
typedef struct HwkLearner HwkLearner;

// Opaque intensity tracker with a fixed influence matrix.
typedef struct HwkTracker HwkTracker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Pointer to a NUL-terminated description of the last failure on this
// thread, or null if the last call succeeded. Valid until the next call
// on the same thread.
const char *hwk_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hwk_version(void);

// Create a tracker for `p` actors.
//
// `w` is the row-major `p × p` influence matrix, `mu_bar` the baseline
// rates, `kernel` a spec such as `"exponential alpha=0.9"`. The step size
// is `eta`, or `eta / sqrt(t)` when `decay_eta` is nonzero.
//
// # Safety
// `w` must point to `p*p` doubles, `mu_bar` to `p`, `kernel` to a
// NUL-terminated string, `out` to writable storage for one pointer.
enum HwkStatus hwk_tracker_new(size_t p,
                               const double *w,
                               const double *mu_bar,
                               const char *kernel,
                               double delta,
                               double eta,
                               int32_t decay_eta,
                               struct HwkTracker **out);

// Feed the events of the next bin. `times` must lie in that bin.
// The loss of the forecast made for the bin is written to `loss` when it
// is not null.
//
// # Safety
// `h` must come from [`hwk_tracker_new`]; `actors` and `times` must point
// to `n` entries each.
enum HwkStatus hwk_tracker_observe_bin(struct HwkTracker *h,
                                       const size_t *actors,
                                       const double *times,
                                       size_t n,
                                       double *loss);

// Copy the forecast rates for the next bin into `out` (`len` must be `p`).
//
// # Safety
// `h` must come from [`hwk_tracker_new`]; `out` must hold `len` doubles.
enum HwkStatus hwk_tracker_rate(const struct HwkTracker *h, double *out, size_t len);

// # Safety
// `h` must come from [`hwk_tracker_new`] and not be used afterwards.
// Null is accepted.
void hwk_tracker_free(struct HwkTracker *h);

// Create a network learner for `p` actors starting from `W = 0`.
//
// `eta` and `rho` are the tracking and learning step sizes, divided by
// `sqrt(t)` when `decay` is nonzero; `l1_penalty` is the soft threshold
// weight. Weights are kept in `[0, w_max]` (pass `INFINITY` for no bound).
// The kernel must have a constant per-bin decay.
//
// # Safety
// `mu_bar` must point to `p` doubles, `kernel` to a NUL-terminated
// string, `out` to writable storage for one pointer.
enum HwkStatus hwk_learner_new(size_t p,
                               const double *mu_bar,
                               const char *kernel,
                               double delta,
                               double eta,
                               double rho,
                               double l1_penalty,
                               double w_max,
                               int32_t decay,
                               struct HwkLearner **out);

// Feed the events of the next bin; see [`hwk_tracker_observe_bin`].
//
// # Safety
// `h` must come from [`hwk_learner_new`]; `actors` and `times` must point
// to `n` entries each.
enum HwkStatus hwk_learner_observe_bin(struct HwkLearner *h,
                                       const size_t *actors,
                                       const double *times,
                                       size_t n,
                                       double *loss);

// Copy the forecast rates for the next bin into `out` (`len` must be `p`).
//
// # Safety
// `h` must come from [`hwk_learner_new`]; `out` must hold `len` doubles.
enum HwkStatus hwk_learner_rate(const struct HwkLearner *h, double *out, size_t len);

// Copy the current influence estimate, row-major, into `out`
// (`len` must be `p*p`).
//
// # Safety
// `h` must come from [`hwk_learner_new`]; `out` must hold `len` doubles.
enum HwkStatus hwk_learner_weights(const struct HwkLearner *h, double *out, size_t len);

// # Safety
// `h` must come from [`hwk_learner_new`] and not be used afterwards.
// Null is accepted.
void hwk_learner_free(struct HwkLearner *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAWKES_ONLINE_H */

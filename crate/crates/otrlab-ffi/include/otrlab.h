/* C interface to the otrlab training laboratory. Generated by cbindgen; do not edit. */

#ifndef OTRLAB_H
#define OTRLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call in this interface.
typedef enum OtrStatus {
  // The call succeeded.
  OTR_STATUS_OK = 0,
  // A required pointer argument was null.
  OTR_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  OTR_STATUS_INVALID_UTF8 = 2,
  // An argument violated a documented precondition (shape, range, ...).
  OTR_STATUS_INVALID_INPUT = 3,
  // The run configuration failed to parse or validate.
  OTR_STATUS_CONFIG = 4,
  // Training produced a non-finite loss and aborted.
  OTR_STATUS_NUMERIC = 5,
  // File I/O, checkpoint, or corpus access failed.
  OTR_STATUS_IO = 6,
  // The training run has already consumed its full step budget.
  OTR_STATUS_FINISHED = 7,
  // A panic was caught at the language boundary; state may be stale.
  OTR_STATUS_PANIC = 8,
} OtrStatus;

// A training run behind an opaque pointer: the resolved configuration, the
// generated task data, and the trainer itself, plus the buffer backing the
// most recently returned metrics row.
typedef struct OtrTrainer OtrTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static NUL-terminated string.
const char *otr_version(void);

// Returns the column header matching the metrics rows produced by
// `otr_trainer_step`, as a static NUL-terminated string.
const char *otr_metrics_header(void);

// Returns the message of the most recent failure on the calling thread, or
// an empty string if no call has failed yet. The pointer stays valid until
// the next failing call on the same thread.
const char *otr_last_error(void);

// Computes the exact expectation of the one-token-rollout loss for a
// single position.
//
// `log_probs` must point to `len` finite log-probabilities of a full
// vocabulary distribution, `gt` is the ground-truth token id, `kappa` the
// sampling temperature, and `beta` the wrong-candidate reward. On success
// writes the expectation to `out`.
//
// # Safety
//
// `log_probs` must be readable for `len` doubles and `out` for one.
enum OtrStatus otr_exact_expectation(const double *log_probs,
                                     size_t len,
                                     size_t gt,
                                     double kappa,
                                     double beta,
                                     double *out);

// Runs one of the built-in verification suites ("gradcheck", "estimator",
// or "equivalence") with the given seed and writes the number of failed
// checks to `out_failures`. A suite that runs to completion returns
// `OTR_STATUS_OK` even when checks fail; inspect `out_failures`.
//
// # Safety
//
// `suite` must be a NUL-terminated string and `out_failures` writable.
enum OtrStatus otr_verify_suite(const char *suite, uint64_t seed, uint32_t *out_failures);

// Creates a trainer from a JSON run configuration (the same schema the
// CLI accepts) and writes the handle to `out`.
//
// The configuration is resolved first: schema errors, impossible shapes,
// and inconsistent budgets are reported as `OTR_STATUS_CONFIG` before any
// training state exists.
//
// # Safety
//
// `config_json` must be a NUL-terminated string and `out` writable. The
// returned handle must be released with `otr_trainer_free`.
enum OtrStatus otr_trainer_new(const char *config_json, struct OtrTrainer **out);

// Creates a trainer that resumes from a checkpoint directory written by
// `otr_trainer_save`. The configuration must match the one the checkpoint
// was trained under.
//
// # Safety
//
// As `otr_trainer_new`; `checkpoint_dir` must be a NUL-terminated path.
enum OtrStatus otr_trainer_resume(const char *config_json,
                                  const char *checkpoint_dir,
                                  struct OtrTrainer **out);

// Advances the trainer by one optimization step.
//
// On success writes a pointer to the step's metrics row — one CSV line
// matching `otr_metrics_header` — to `out_row`. The pointer stays valid
// until the next call on this handle or `otr_trainer_free`. When the full
// step budget has already been consumed, returns `OTR_STATUS_FINISHED`
// and writes null.
//
// # Safety
//
// `handle` must be a live trainer from this library and `out_row`
// writable.
enum OtrStatus otr_trainer_step(struct OtrTrainer *handle, const char **out_row);

// Writes the trainer's current step to `out_step` and its total budget to
// `out_total`. Either pointer may be null to skip that value.
//
// # Safety
//
// `handle` must be a live trainer from this library.
enum OtrStatus otr_trainer_progress(struct OtrTrainer *handle,
                                    uint64_t *out_step,
                                    uint64_t *out_total);

// Greedy exact-match accuracy over one of the task splits: 0 = train,
// 1 = in-distribution eval, 2 = out-of-distribution eval. Decoding uses
// the run configuration's evaluation settings and does not change
// training state.
//
// # Safety
//
// `handle` must be a live trainer from this library and `out_accuracy`
// writable.
enum OtrStatus otr_trainer_evaluate(struct OtrTrainer *handle,
                                    uint32_t split,
                                    double *out_accuracy);

// Saves a checkpoint of the trainer into `dir` (created if needed). The
// checkpoint restores byte-identically through `otr_trainer_resume`.
//
// # Safety
//
// `handle` must be a live trainer from this library and `dir` a
// NUL-terminated path.
enum OtrStatus otr_trainer_save(struct OtrTrainer *handle, const char *dir);

// Releases a trainer handle. Passing null is a no-op.
//
// # Safety
//
// `handle` must be null or a live trainer from this library; it must not
// be used afterwards.
void otr_trainer_free(struct OtrTrainer *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTRLAB_H */

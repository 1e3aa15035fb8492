#ifndef MICRANK_H
#define MICRANK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MicrankStatus {
  MICRANK_STATUS_OK = 0,
  MICRANK_STATUS_NULL_POINTER = 1,
  MICRANK_STATUS_INVALID_ARGUMENT = 2,
  MICRANK_STATUS_IO = 3,
  MICRANK_STATUS_CHECKPOINT = 4,
  MICRANK_STATUS_BUFFER_TOO_SMALL = 5,
  MICRANK_STATUS_PANIC = 6,
} MicrankStatus;

/**
 * Opaque handle to a loaded ranker.
 */
typedef struct MicrankRanker MicrankRanker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *micrank_last_error(void);

/**
 * Number of mel bands produced by `micrank_logmel`.
 */
size_t micrank_n_mels(void);

/**
 * Log-mel features of 16 kHz mono audio, row-major `frames x 40`.
 *
 * `*n_frames` receives the frame count. With `out` null only the count
 * is computed; otherwise `out_len` must be at least `frames * 40`.
 *
 * # Safety
 * `samples` must point to `n_samples` floats and `out`, when non-null,
 * to `out_len` writable floats.
 */
enum MicrankStatus micrank_logmel(const float *samples,
                                  size_t n_samples,
                                  float *out,
                                  size_t out_len,
                                  size_t *n_frames);

/**
 * Loads a ranker checkpoint. Free the handle with `micrank_ranker_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MicrankStatus micrank_ranker_load(const char *path, struct MicrankRanker **out);

/**
 * Releases a handle from `micrank_ranker_load`. Null is ignored.
 *
 * # Safety
 * `ranker` must come from `micrank_ranker_load` and not be used again.
 */
void micrank_ranker_free(struct MicrankRanker *ranker);

/**
 * Parameter count of a loaded ranker, or 0 for null.
 *
 * # Safety
 * `ranker` must be null or a live handle.
 */
size_t micrank_ranker_param_count(const struct MicrankRanker *ranker);

/**
 * Scores `n_channels` channels given as log-mel matrices. Channel `i`
 * occupies `frames[i] * 40` consecutive floats of `features`, channels
 * back to back. Writes one score per channel; higher is better.
 *
 * # Safety
 * `features` must hold `sum(frames) * 40` floats, `frames` and `scores`
 * `n_channels` elements each.
 */
enum MicrankStatus micrank_ranker_score_features(const struct MicrankRanker *ranker,
                                                 const float *features,
                                                 const size_t *frames,
                                                 size_t n_channels,
                                                 double *scores);

/**
 * Scores channels given as raw 16 kHz audio: `channels[i]` points to
 * `lengths[i]` samples.
 *
 * # Safety
 * `channels` and `lengths` must have `n_channels` elements, each channel
 * pointer its stated number of floats; `scores` `n_channels` slots.
 */
enum MicrankStatus micrank_ranker_score_audio(const struct MicrankRanker *ranker,
                                              const float *const *channels,
                                              const size_t *lengths,
                                              size_t n_channels,
                                              double *scores);

/**
 * Signal-to-distortion ratio in dB of `estimate` against `reference`
 * (single-gain projection, clipped to +-60 dB).
 *
 * # Safety
 * Both buffers must hold their stated lengths; `out` must be valid.
 */
enum MicrankStatus micrank_sdr(const float *estimate,
                               size_t estimate_len,
                               const float *reference,
                               size_t reference_len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MICRANK_H */

#ifndef STGDANCE_H
#define STGDANCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function.
typedef enum StgStatus {
  STG_STATUS_OK = 0,
  // A required pointer argument was null.
  STG_STATUS_NULL_POINTER = 1,
  // Bad argument, configuration or shape.
  STG_STATUS_INVALID_ARGUMENT = 2,
  STG_STATUS_IO = 3,
  // A file did not parse.
  STG_STATUS_FORMAT = 4,
  // Non-finite values or training divergence.
  STG_STATUS_NUMERIC = 5,
  // Artifact does not match the requested configuration.
  STG_STATUS_MISMATCH = 6,
  // The caller's buffer is too small.
  STG_STATUS_BUFFER_TOO_SMALL = 7,
  // An internal invariant failed.
  STG_STATUS_INTERNAL = 8,
  STG_STATUS_PANIC = 9,
} StgStatus;

// A denoiser with its normalisation statistics and noise schedule.
typedef struct StgModel StgModel;

// Group motion, `dancers x frames x channels`, with its conditioning.
typedef struct StgMotion StgMotion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *stg_last_error(void);

// Library version as a static NUL-terminated string.
const char *stg_version(void);

// Creates an untrained model. `config` holds `key=value` lines (may be
// null for the defaults); unknown keys are rejected.
//
// # Safety
// `config` must be null or a valid NUL-terminated string and `out` a valid
// pointer to writable storage.
enum StgStatus stg_model_new(const char *config, uint64_t seed, struct StgModel **out);

// Loads a checkpoint written by `stgdance train` or [`stg_model_save`].
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` writable.
enum StgStatus stg_model_load(const char *path, struct StgModel **out);

// # Safety
// `model` must come from this library; `path` must be a valid string.
enum StgStatus stg_model_save(const struct StgModel *model, const char *path);

// Input channels and conditioning width the model expects.
//
// # Safety
// `model` must come from this library; outputs must be writable or null.
enum StgStatus stg_model_dims(const struct StgModel *model, size_t *d_in, size_t *music_dim);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void stg_model_free(struct StgModel *model);

// Synthesises a group performance. `style` is one of circle, line,
// figure8, crossover.
//
// # Safety
// `style` must be a valid NUL-terminated string and `out` writable.
enum StgStatus stg_motion_synthesize(const char *style,
                                     size_t dancers,
                                     size_t frames,
                                     uint64_t seed,
                                     struct StgMotion **out);

// Wraps caller data (`dancers * frames * channels` values, dancer-major,
// then frame, then channel). Root positions are channels 0 and 1. The
// conditioning is the synthetic default for a circle formation.
//
// # Safety
// `data` must point to `dancers * frames * channels` readable doubles.
enum StgStatus stg_motion_from_data(const double *data,
                                    size_t dancers,
                                    size_t frames,
                                    size_t channels,
                                    struct StgMotion **out);

// # Safety
// `path` must be a valid NUL-terminated string and `out` writable.
enum StgStatus stg_motion_load(const char *path, struct StgMotion **out);

// # Safety
// `motion` must come from this library; `path` must be a valid string.
enum StgStatus stg_motion_save(const struct StgMotion *motion, const char *path);

// # Safety
// `motion` must come from this library; outputs must be writable or null.
enum StgStatus stg_motion_dims(const struct StgMotion *motion,
                               size_t *dancers,
                               size_t *frames,
                               size_t *channels);

// Copies the motion values into `buf` in the layout of
// [`stg_motion_from_data`]. `len` is the capacity in doubles.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum StgStatus stg_motion_copy_data(const struct StgMotion *motion, double *buf, size_t len);

// # Safety
// `motion` must be null or a handle from this library not yet freed.
void stg_motion_free(struct StgMotion *motion);

// Samples `dancers` dancers conditioned on the music of `conditioning`.
// `steps` of 0 uses the model's training schedule.
//
// # Safety
// Handles must come from this library and `out` must be writable.
enum StgStatus stg_generate(const struct StgModel *model,
                            const struct StgMotion *conditioning,
                            size_t dancers,
                            size_t steps,
                            uint64_t seed,
                            bool deterministic,
                            struct StgMotion **out);

// Fraction of frames in which some pair of dancers is closer than `delta`.
//
// # Safety
// `motion` must come from this library and `out` must be writable.
enum StgStatus stg_metric_tif(const struct StgMotion *motion, double delta, double *out);

// Mean pairwise correlation of dancer speed profiles.
//
// # Safety
// `motion` must come from this library and `out` must be writable.
enum StgStatus stg_metric_gmc(const struct StgMotion *motion, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STGDANCE_H */

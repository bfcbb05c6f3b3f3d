#ifndef STAGAN_H
#define STAGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StaganStatus {
  STAGAN_STATUS_OK = 0,
  STAGAN_STATUS_NULL_POINTER = 1,
  STAGAN_STATUS_INVALID_ARGUMENT = 2,
  STAGAN_STATUS_CONFIG = 3,
  STAGAN_STATUS_SHAPE = 4,
  STAGAN_STATUS_IO = 5,
  STAGAN_STATUS_DATA = 6,
  STAGAN_STATUS_CHECKPOINT = 7,
  STAGAN_STATUS_NUMERIC = 8,
  STAGAN_STATUS_PANIC = 9,
} StaganStatus;

/**
 * A loaded checkpoint.
 */
typedef struct StaganModel StaganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on this thread.
 */
const char *stagan_last_error_message(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *stagan_version(void);

/**
 * Loads the checkpoint directory `path` into `*out`.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum StaganStatus stagan_model_load(const char *path, struct StaganModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`stagan_model_load`] and not be used afterwards.
 */
void stagan_model_free(struct StaganModel *model);

/**
 * Frame side the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum StaganStatus stagan_model_image_size(const struct StaganModel *model, size_t *out);

/**
 * Ablation setting of the model as an ASCII letter `A`..`F`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum StaganStatus stagan_model_ablation(const struct StaganModel *model, char *out);

/**
 * Synthesizes `frames` egocentric frames from exo frames and semantic maps,
 * each `frames x 3 x size x size`, into `out` of the same layout. When the
 * model fuses with attention and `attention_out` is not null, it receives
 * `frames x 4 x size x size` weights in branch order temporal-down,
 * temporal-up, spatial-down, spatial-up.
 *
 * # Safety
 * All arrays must have the stated lengths.
 */
enum StaganStatus stagan_synthesize(const struct StaganModel *model,
                                    const float *exo,
                                    const float *sem,
                                    size_t frames,
                                    size_t size,
                                    float *out,
                                    float *attention_out);

/**
 * Writes a synthetic dataset (`train_clips` + `test_clips` clips of
 * `frames` frames at `size` pixels) to the directory `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid C string.
 */
enum StaganStatus stagan_generate_dataset(const char *out_dir,
                                          uint64_t seed,
                                          size_t train_clips,
                                          size_t test_clips,
                                          size_t size,
                                          size_t frames);

/**
 * Trains from a JSON configuration (the CLI schema; missing fields take
 * defaults) and writes the final checkpoint to `<checkpoint_dir>/final`.
 *
 * # Safety
 * Both arguments must be valid C strings.
 */
enum StaganStatus stagan_train(const char *config_json, const char *checkpoint_dir);

/**
 * SSIM of two `3 x size x size` frames.
 *
 * # Safety
 * See [`stagan_psnr`].
 */
enum StaganStatus stagan_ssim(const float *a, const float *b, size_t size, double *out);

/**
 * PSNR in dB, capped at 100.
 *
 * # Safety
 * `a` and `b` must hold `3 * size * size` floats; `out` must be valid.
 */
enum StaganStatus stagan_psnr(const float *a, const float *b, size_t size, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAGAN_H */

#ifndef ERDETECT_H
#define ERDETECT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum ErdStatus {
  ERD_STATUS_OK = 0,
  ERD_STATUS_NULL_POINTER = 1,
  ERD_STATUS_INVALID_ARGUMENT = 2,
  ERD_STATUS_IO = 3,
  ERD_STATUS_MALFORMED = 4,
  ERD_STATUS_DIMENSION_MISMATCH = 5,
  ERD_STATUS_PRECONDITION = 6,
  ERD_STATUS_CONFIG_MISMATCH = 7,
  ERD_STATUS_PANIC = 8,
} ErdStatus;

/**
 * Opaque detector handle.
 */
typedef struct ErdDetector ErdDetector;

/**
 * Opaque classifier handle.
 */
typedef struct ErdModel ErdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *erd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *erd_version(void);

/**
 * Loads a model file written by `erdetect train-model`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ErdStatus erd_model_load(const char *path, struct ErdModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`erd_model_load`] and not be used afterwards.
 */
void erd_model_free(struct ErdModel *model);

/**
 * Writes the model's input height, width, channel count and class count.
 *
 * # Safety
 * `model` must be a live handle and every out pointer writable.
 */
enum ErdStatus erd_model_shape(const struct ErdModel *model,
                               size_t *height,
                               size_t *width,
                               size_t *channels,
                               size_t *num_classes);

/**
 * Classifies `len` HWC pixels in [0, 1]. Writes `num_classes` probabilities
 * into `probs` and the arg-max class into `label`.
 *
 * # Safety
 * `pixels` must hold `len` values, `probs` room for `probs_len` values.
 */
enum ErdStatus erd_model_predict(const struct ErdModel *model,
                                 const double *pixels,
                                 size_t len,
                                 double *probs,
                                 size_t probs_len,
                                 size_t *label);

/**
 * Loads a detector file written by `erdetect train-detector`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ErdStatus erd_detector_load(const char *path, struct ErdDetector **out);

/**
 * Releases a detector handle; null is ignored.
 *
 * # Safety
 * `detector` must come from [`erd_detector_load`] and not be used afterwards.
 */
void erd_detector_free(struct ErdDetector *detector);

/**
 * Erase-and-restore detection of one image with masks drawn from `seed`.
 * Writes 1 (adversarial) or 0 (benign) and the detector score.
 *
 * # Safety
 * Handles must be live; `pixels` must hold `len` values; outs writable.
 */
enum ErdStatus erd_detect(const struct ErdDetector *detector,
                          const struct ErdModel *model,
                          const double *pixels,
                          size_t len,
                          uint64_t seed,
                          int32_t *adversarial,
                          double *score);

/**
 * Telea inpainting of an HWC image. `mask` has `height * width` bytes,
 * nonzero marking pixels to restore. Writes `height * width * channels`
 * values into `out`.
 *
 * # Safety
 * `pixels` and `out` must hold `height * width * channels` values and `mask`
 * `height * width` bytes.
 */
enum ErdStatus erd_inpaint_telea(const double *pixels,
                                 size_t height,
                                 size_t width,
                                 size_t channels,
                                 const uint8_t *mask,
                                 size_t radius,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERDETECT_H */

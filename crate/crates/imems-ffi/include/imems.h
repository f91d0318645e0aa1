/* C interface to the imems channel codec and segmentation metrics. */

#ifndef IMEMS_H
#define IMEMS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ImemsStatus {
  /**
   * The call succeeded.
   */
  ImemsStatus_Ok = 0,
  /**
   * A required pointer was null.
   */
  ImemsStatus_NullArgument = 1,
  /**
   * An argument was out of range or inconsistent (bad label, size
   * mismatch, wrong buffer length).
   */
  ImemsStatus_InvalidArgument = 2,
  /**
   * The data violates a codec invariant (for example a pixel without
   * exactly one foreground value).
   */
  ImemsStatus_Integrity = 3,
  /**
   * Any other runtime failure.
   */
  ImemsStatus_Runtime = 4,
  /**
   * A panic was caught at the boundary; state may be inconsistent.
   */
  ImemsStatus_Panic = 5,
} ImemsStatus;

/**
 * A pooled pixel-count confusion matrix.
 */
typedef struct ImemsConfusion ImemsConfusion;

/**
 * An encoded image: one grayscale channel per label.
 */
typedef struct ImemsEmbedded ImemsEmbedded;

/**
 * Scalar scores of a confusion matrix. Per-class F values come from
 * `imems_confusion_class_f`.
 */
typedef struct ImemsMetrics {
  /**
   * Fraction of pixels whose predicted label matches the ground truth.
   */
  double accuracy;
  /**
   * Unweighted mean of the per-class F measures.
   */
  double average_f;
} ImemsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, NUL terminated. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *imems_last_error(void);

/**
 * Encode a grayscale image and its label mask into per-label channels.
 *
 * `gray` and `labels` hold `width * height` bytes each; every label must be
 * below `num_labels` (2..=256). On success `*out` owns the new object and
 * must be released with `imems_embedded_free`.
 *
 * # Safety
 * `gray` and `labels` must point to `width * height` readable bytes, and
 * `out` must be a valid writable pointer.
 */
enum ImemsStatus imems_encode(const uint8_t *gray,
                              uint32_t width,
                              uint32_t height,
                              const uint8_t *labels,
                              uint32_t num_labels,
                              struct ImemsEmbedded **out);

/**
 * Release an embedded image. Passing null is a no-op.
 *
 * # Safety
 * `handle` must come from `imems_encode` and not have been freed already.
 */
void imems_embedded_free(struct ImemsEmbedded *handle);

/**
 * Channel count of an embedded image.
 *
 * # Safety
 * `handle` must be a live pointer from `imems_encode`; `out` must be
 * writable.
 */
enum ImemsStatus imems_embedded_num_labels(const struct ImemsEmbedded *handle, uint32_t *out);

/**
 * Pixel dimensions of an embedded image.
 *
 * # Safety
 * `handle` must be a live pointer from `imems_encode`; `width` and `height`
 * must be writable.
 */
enum ImemsStatus imems_embedded_size(const struct ImemsEmbedded *handle,
                                     uint32_t *width,
                                     uint32_t *height);

/**
 * Copy one channel (`width * height` bytes) into `buf`.
 *
 * # Safety
 * `handle` must be live; `buf` must point to `len` writable bytes.
 */
enum ImemsStatus imems_embedded_channel(const struct ImemsEmbedded *handle,
                                        uint32_t channel,
                                        uint8_t *buf,
                                        uintptr_t len);

/**
 * Decode the embedded channels to a label per pixel (argmax).
 *
 * # Safety
 * `handle` must be live; `buf` must point to `len` writable bytes.
 */
enum ImemsStatus imems_decode(const struct ImemsEmbedded *handle, uint8_t *buf, uintptr_t len);

/**
 * Reconstruct the grayscale image carried by the channels. Fails with
 * `Integrity` when any pixel lacks exactly one foreground value.
 *
 * # Safety
 * `handle` must be live; `buf` must point to `len` writable bytes.
 */
enum ImemsStatus imems_recover_grayscale(const struct ImemsEmbedded *handle,
                                         uint8_t *buf,
                                         uintptr_t len);

/**
 * Create an empty confusion matrix for `num_labels` classes (2..=256).
 *
 * # Safety
 * `out` must be a valid writable pointer. Release the result with
 * `imems_confusion_free`.
 */
enum ImemsStatus imems_confusion_new(uint32_t num_labels, struct ImemsConfusion **out);

/**
 * Release a confusion matrix. Passing null is a no-op.
 *
 * # Safety
 * `handle` must come from `imems_confusion_new` and not have been freed
 * already.
 */
void imems_confusion_free(struct ImemsConfusion *handle);

/**
 * Pool one image pair into the matrix: `gt` and `pred` hold one label per
 * pixel for the same `width * height` image.
 *
 * # Safety
 * `handle` must be live; `gt` and `pred` must point to `width * height`
 * readable bytes.
 */
enum ImemsStatus imems_confusion_accumulate(struct ImemsConfusion *handle,
                                            const uint8_t *gt,
                                            const uint8_t *pred,
                                            uint32_t width,
                                            uint32_t height);

/**
 * Accuracy and mean F of everything pooled so far. Fails with
 * `InvalidArgument` when the matrix is still empty.
 *
 * # Safety
 * `handle` must be live; `out` must be writable.
 */
enum ImemsStatus imems_confusion_metrics(const struct ImemsConfusion *handle,
                                         struct ImemsMetrics *out);

/**
 * F measure of one class (1.0 for a class absent from both ground truth
 * and predictions).
 *
 * # Safety
 * `handle` must be live; `out` must be writable.
 */
enum ImemsStatus imems_confusion_class_f(const struct ImemsConfusion *handle,
                                         uint32_t class_,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMEMS_H */

#ifndef SEMAFORGE_H
#define SEMAFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_UTF8 = 2,
  SF_STATUS_DIMENSION = 3,
  SF_STATUS_CONTRACT = 4,
  SF_STATUS_STATE = 5,
  SF_STATUS_PARSE = 6,
  SF_STATUS_FORMAT = 7,
  SF_STATUS_GEOMETRY = 8,
  SF_STATUS_DEGENERATE_FRAGMENT = 9,
  SF_STATUS_NON_FINITE = 10,
  SF_STATUS_IO = 11,
  SF_STATUS_JSON = 12,
  SF_STATUS_IMAGE = 13,
  SF_STATUS_PANIC = 14,
} SfStatus;

/*
 Opaque trained detector.
 */
typedef struct SfModel SfModel;

/*
 Output of one prediction. Label 0 is fake, 1 is real.
 */
typedef struct SfPrediction {
  int32_t label;
  /*
   Fused scores `[fake, real]`.
   */
  double scores[2];
  /*
   `scores[0] / (scores[0] + scores[1])`.
   */
  double fake_score;
  /*
   Possibility matrix, row-major 2×6 (row 0 fake, row 1 real), fragment
   order p, b, f, e, m, n.
   */
  double possibility[12];
  /*
   Fragment weights in the same order.
   */
  double weights[6];
} SfPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer stays
 valid until the next call into this library on the same thread.
 */
const char *sf_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/*
 Loads a model directory written by `semaforge train`.

 # Safety
 `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SfStatus sf_model_load(const char *dir, struct SfModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from [`sf_model_load`] and not be used afterwards.
 */
void sf_model_free(struct SfModel *model);

/*
 Side length of the model's fragment crops, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uintptr_t sf_model_fragment_size(const struct SfModel *model);

/*
 Scores an RGB image given as `height·width·3` interleaved values in
 [0, 1] and 81 landmarks as `x0, y0, x1, y1, …` pixel coordinates.

 # Safety
 `pixels` must point to `height·width·3` values, `landmarks` to 162
 values, and `out` must be writable.
 */
enum SfStatus sf_predict(const struct SfModel *model,
                         const double *pixels,
                         uintptr_t height,
                         uintptr_t width,
                         const double *landmarks,
                         struct SfPrediction *out);

/*
 Scores a PNG file with its landmark file.

 # Safety
 Paths must be NUL-terminated strings and `out` writable.
 */
enum SfStatus sf_predict_files(const struct SfModel *model,
                               const char *image_path,
                               const char *landmarks_path,
                               struct SfPrediction *out);

/*
 Fused scores `Σᵢ wᵢ·P[y][i]` for a row-major 2×6 possibility matrix and
 six weights.

 # Safety
 `possibility` must point to 12 values, `weights` to 6, `out` to 2.
 */
enum SfStatus sf_fuse(const double *possibility, const double *weights, double *out);

/*
 Trapezoidal ROC AUC with `positive[i] != 0` marking positives.

 # Safety
 `scores` and `positive` must point to `n` elements and `out` be writable.
 */
enum SfStatus sf_roc_auc(const double *scores, const uint8_t *positive, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMAFORGE_H */

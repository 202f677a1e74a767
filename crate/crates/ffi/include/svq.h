#ifndef SVQ_H
#define SVQ_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SvqStatus {
  SVQ_STATUS_OK = 0,
  SVQ_STATUS_NULL_POINTER = 1,
  SVQ_STATUS_INVALID_ARGUMENT = 2,
  SVQ_STATUS_CONFIG = 3,
  SVQ_STATUS_DATA = 4,
  SVQ_STATUS_NUMERIC = 5,
  SVQ_STATUS_PARSE = 6,
  SVQ_STATUS_IO = 7,
  SVQ_STATUS_DIVERGED = 8,
  SVQ_STATUS_PANIC = 9,
} SvqStatus;

/**
 * Paired dataset handle.
 */
typedef struct SvqDataset SvqDataset;

/**
 * Trained run handle: stage-1 model plus, when trained, the transformer.
 */
typedef struct SvqModel SvqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *svq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *svq_version(void);

/**
 * Generates `n` paired samples of `size` x `size` pixels.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum SvqStatus svq_dataset_generate(size_t n, uint64_t seed, size_t size, struct SvqDataset **out);

/**
 * Reads a dataset directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum SvqStatus svq_dataset_read(const char *dir, struct SvqDataset **out);

/**
 * Writes a dataset directory (PPM images, PGM maps, manifest).
 *
 * # Safety
 * `ds` must be a live handle; `dir` a NUL-terminated string.
 */
enum SvqStatus svq_dataset_write(const struct SvqDataset *ds, const char *dir);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t svq_dataset_len(const struct SvqDataset *ds);

/**
 * Image side length in pixels; 0 for a null or empty dataset.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t svq_dataset_image_size(const struct SvqDataset *ds);

/**
 * Copies sample `index` into `image` (`size*size*3` floats) and `semantics`
 * (`size*size` class ids). Either buffer may be null to skip it.
 *
 * # Safety
 * Non-null buffers must hold the stated number of elements.
 */
enum SvqStatus svq_dataset_get(const struct SvqDataset *ds,
                               size_t index,
                               float *image,
                               size_t image_len,
                               uint8_t *semantics,
                               size_t semantics_len);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void svq_dataset_free(struct SvqDataset *ds);

/**
 * Mean SSIM over the three channels of two `size x size` images.
 *
 * # Safety
 * `a` and `b` must hold `size*size*3` floats; `out` must be valid.
 */
enum SvqStatus svq_ssim(const float *a, const float *b, size_t size, double *out);

/**
 * Mean IoU in percent over classes present in either map.
 *
 * # Safety
 * `pred` and `gt` must hold `width*height` ids; `out` must be valid.
 */
enum SvqStatus svq_miou(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t width,
                        size_t height,
                        size_t num_classes,
                        double *out);

/**
 * Fréchet distance between the embeddings of two image sets, each given as
 * `count` consecutive `size*size*3` images.
 *
 * # Safety
 * `a` must hold `count_a*size*size*3` floats, `b` likewise; `out` must be valid.
 */
enum SvqStatus svq_frechet_distance(const float *a,
                                    size_t count_a,
                                    const float *b,
                                    size_t count_b,
                                    size_t size,
                                    double *out);

/**
 * Loads a run directory written by `svq train-ae` (and optionally `train-ar`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum SvqStatus svq_model_load(const char *dir, struct SvqModel **out);

/**
 * Image side length the model expects; 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t svq_model_image_size(const struct SvqModel *m);

/**
 * Latent grid side length; grids hold `latent_size^2` indices. 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t svq_model_latent_size(const struct SvqModel *m);

/**
 * Whether the model is the coupled variant (1) or the decoupled baseline (0).
 *
 * # Safety
 * `m` must be null or a live handle.
 */
int32_t svq_model_is_coupled(const struct SvqModel *m);

/**
 * Encodes one (image, semantic map) pair to its semantic and image grids.
 *
 * # Safety
 * Buffers must hold the stated element counts; outputs `latent_size^2` each.
 */
enum SvqStatus svq_model_encode(const struct SvqModel *m,
                                const float *image,
                                size_t image_len,
                                const uint8_t *semantics,
                                size_t semantics_len,
                                uint32_t *z_semantic,
                                uint32_t *z_image,
                                size_t grid_len);

/**
 * Decodes an image grid (with its semantic grid, which the baseline ignores).
 *
 * # Safety
 * Grids hold `grid_len` indices; `image` holds `image_len` floats.
 */
enum SvqStatus svq_model_decode(const struct SvqModel *m,
                                const uint32_t *z_image,
                                const uint32_t *z_semantic,
                                size_t grid_len,
                                float *image,
                                size_t image_len);

/**
 * Samples an image grid conditioned on a semantic grid.
 *
 * # Safety
 * Grids hold `grid_len` indices.
 */
enum SvqStatus svq_model_sample(const struct SvqModel *m,
                                const uint32_t *z_semantic,
                                size_t grid_len,
                                double temperature,
                                size_t top_k,
                                uint64_t seed,
                                uint32_t *z_image);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void svq_model_free(struct SvqModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVQ_H */

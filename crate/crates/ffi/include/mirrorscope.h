#ifndef MIRRORSCOPE_H
#define MIRRORSCOPE_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_ARGUMENT = 2,
  MS_STATUS_SHAPE = 3,
  MS_STATUS_IO = 4,
  MS_STATUS_FORMAT = 5,
  MS_STATUS_EMPTY_MASK = 6,
  MS_STATUS_UNDEFINED = 7,
  MS_STATUS_BUFFER_TOO_SMALL = 8,
  MS_STATUS_PANIC = 9,
} MsStatus;

/**
 * Rank-4 (n, c, h, w) tensor of doubles.
 */
typedef struct MsFeatureMap MsFeatureMap;

/**
 * A configured neck with its parameters.
 */
typedef struct MsNeck MsNeck;

/**
 * A polar polygon label: centre plus the surviving vertices.
 */
typedef struct MsPolygon MsPolygon;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *ms_last_error(void);

void ms_clear_error(void);

/**
 * Short static name of a status code.
 */
const char *ms_status_name(enum MsStatus status);

/**
 * Copies `n*c*h*w` doubles from `data` into a new handle.
 *
 * # Safety
 * `data` must point at `n*c*h*w` readable doubles; `out` must be writable.
 */
enum MsStatus ms_feature_map_new(size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 const double *data,
                                 struct MsFeatureMap **out);

/**
 * Reads an FMAP1 file holding a rank-4 tensor.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MsStatus ms_feature_map_read(const char *path, struct MsFeatureMap **out);

/**
 * # Safety
 * `fm` must be a live handle; `path` a NUL-terminated string.
 */
enum MsStatus ms_feature_map_write(const struct MsFeatureMap *fm, const char *path);

/**
 * Writes (n, c, h, w) into `dims`.
 *
 * # Safety
 * `fm` must be a live handle; `dims` must hold 4 elements.
 */
enum MsStatus ms_feature_map_dims(const struct MsFeatureMap *fm, size_t *dims);

/**
 * Element count, 0 for NULL.
 *
 * # Safety
 * `fm` must be NULL or a live handle.
 */
size_t ms_feature_map_len(const struct MsFeatureMap *fm);

/**
 * Borrowed pointer to the row-major data, NULL for NULL. Valid while the handle lives.
 *
 * # Safety
 * `fm` must be NULL or a live handle.
 */
const double *ms_feature_map_data(const struct MsFeatureMap *fm);

/**
 * # Safety
 * `fm` must be NULL or a handle not yet freed.
 */
void ms_feature_map_free(struct MsFeatureMap *fm);

/**
 * Builds a neck from `key=value` configuration text, drawing parameters from `seed`.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` must be writable.
 */
enum MsStatus ms_neck_new(const char *config, uint64_t seed, struct MsNeck **out);

/**
 * Replaces the parameters with those listed in a manifest.
 *
 * # Safety
 * `neck` must be a live handle; `manifest` a NUL-terminated string.
 */
enum MsStatus ms_neck_load_params(struct MsNeck *neck, const char *manifest);

/**
 * Writes the current parameters as FMAP1 files plus `params.txt` into `dir`.
 *
 * # Safety
 * `neck` must be a live handle; `dir` a NUL-terminated string.
 */
enum MsStatus ms_neck_save_params(const struct MsNeck *neck, const char *dir);

/**
 * Fuses `count` levels (highest resolution first) into one map.
 *
 * # Safety
 * `neck` must be a live handle; `levels` must hold `count` live handles.
 */
enum MsStatus ms_neck_run(const struct MsNeck *neck,
                          const struct MsFeatureMap *const *levels,
                          size_t count,
                          struct MsFeatureMap **out);

/**
 * # Safety
 * `neck` must be NULL or a handle not yet freed.
 */
void ms_neck_free(struct MsNeck *neck);

/**
 * Mean absolute error between a [0,1] map and a mask.
 *
 * # Safety
 * `pred` and `gt` must hold `height*width` elements; `out` must be writable.
 */
enum MsStatus ms_mae(const double *pred,
                     const uint8_t *gt,
                     size_t height,
                     size_t width,
                     double *out);

/**
 * F-measure at the adaptive threshold. `MS_STATUS_UNDEFINED` for an empty mask.
 *
 * # Safety
 * As [`ms_mae`].
 */
enum MsStatus ms_f_beta(const double *pred,
                        const uint8_t *gt,
                        size_t height,
                        size_t width,
                        double beta2,
                        double *out);

/**
 * Enhanced-alignment measure of the adaptively binarized map.
 *
 * # Safety
 * As [`ms_mae`].
 */
enum MsStatus ms_e_measure(const double *pred,
                           const uint8_t *gt,
                           size_t height,
                           size_t width,
                           double *out);

/**
 * Structure measure.
 *
 * # Safety
 * As [`ms_mae`].
 */
enum MsStatus ms_s_measure(const double *pred,
                           const uint8_t *gt,
                           size_t height,
                           size_t width,
                           double alpha,
                           double *out);

/**
 * Mean SSIM of two [0,1] images of the same size (each side at least 11).
 *
 * # Safety
 * `a` and `b` must hold `height*width` doubles; `out` must be writable.
 */
enum MsStatus ms_ssim(const double *a, const double *b, size_t height, size_t width, double *out);

/**
 * Intersection over union of two masks; 1 when both are empty.
 *
 * # Safety
 * `a` and `b` must hold `height*width` bytes; `out` must be writable.
 */
enum MsStatus ms_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Encodes a mask into `bins` polar vertices and keeps those with confidence above `threshold`.
 *
 * # Safety
 * `mask` must hold `height*width` bytes; `out` must be writable.
 */
enum MsStatus ms_polygon_encode(const uint8_t *mask_bits,
                                size_t height,
                                size_t width,
                                size_t bins,
                                double threshold,
                                struct MsPolygon **out);

/**
 * Number of vertices, 0 for NULL.
 *
 * # Safety
 * `poly` must be NULL or a live handle.
 */
size_t ms_polygon_vertex_count(const struct MsPolygon *poly);

/**
 * Copies the normalized centre and per-vertex bin, distance and confidence.
 * Any of the arrays may be NULL; non-NULL ones need `capacity >= vertex count`.
 *
 * # Safety
 * `poly` must be a live handle; each non-NULL array must hold `capacity` elements.
 */
enum MsStatus ms_polygon_vertices(const struct MsPolygon *poly,
                                  double *center,
                                  size_t *bins,
                                  double *distances,
                                  double *confidences,
                                  size_t capacity);

/**
 * Fills `out_mask` (`height*width` bytes, 0 or 1) by even-odd scanline fill.
 * `degenerate` (optional) is set to 1 when fewer than three vertices survive.
 *
 * # Safety
 * `poly` must be a live handle; `out_mask` must hold `height*width` bytes.
 */
enum MsStatus ms_polygon_rasterize(const struct MsPolygon *poly,
                                   size_t height,
                                   size_t width,
                                   uint8_t *out_mask,
                                   uint8_t *degenerate);

/**
 * # Safety
 * `poly` must be NULL or a handle not yet freed.
 */
void ms_polygon_free(struct MsPolygon *poly);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIRRORSCOPE_H */

#ifndef GAZECAL_H
#define GAZECAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Maximum number of residual stages in a [`GzNetworkConfig`].
 */
#define GZ_MAX_STAGES 8

/**
 * Outcome of a call.
 */
typedef enum GzStatus {
  GZ_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GZ_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument or input file failed validation.
   */
  GZ_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Reading or writing a file failed.
   */
  GZ_STATUS_IO = 3,
  /**
   * A computation produced non-finite values or did not converge.
   */
  GZ_STATUS_NUMERICAL = 4,
  /**
   * An internal error; the library state is unchanged.
   */
  GZ_STATUS_INTERNAL = 5,
} GzStatus;

typedef enum GzPooling {
  GZ_POOLING_AVERAGE = 0,
  GZ_POOLING_FLATTEN = 1,
} GzPooling;

/**
 * A loaded sample store.
 */
typedef struct GzDataset GzDataset;

/**
 * A trained or freshly initialized network.
 */
typedef struct GzNetwork GzNetwork;

/**
 * Network architecture. Only the first `stage_count` entries of
 * `stage_channels` are used.
 */
typedef struct GzNetworkConfig {
  size_t stem_channels;
  size_t stage_channels[GZ_MAX_STAGES];
  size_t stage_count;
  size_t blocks_per_stage;
  size_t fc_width;
  enum GzPooling pooling;
} GzNetworkConfig;

/**
 * Mean and population standard deviation of the per-sample error.
 */
typedef struct GzErrorStats {
  double mean;
  double std;
  size_t count;
} GzErrorStats;

/**
 * Head-to-camera pose: row-major rotation, translation in millimetres.
 */
typedef struct GzPose {
  double rotation[9];
  double translation[3];
  double rms_error;
} GzPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or an empty string.
 * The pointer stays valid until the next call into the library on this
 * thread.
 */
const char *gz_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gz_version(void);

/**
 * Fills `out` with the default architecture.
 *
 * # Safety
 * `out` must be null or point to writable memory for one config.
 */
enum GzStatus gz_network_config_default(struct GzNetworkConfig *out);

/**
 * Creates a freshly initialized network. Free it with
 * [`gz_network_free`].
 *
 * # Safety
 * `config` must be null or point to a valid config; `out` must be null or
 * writable.
 */
enum GzStatus gz_network_new(const struct GzNetworkConfig *config,
                             uint64_t seed,
                             struct GzNetwork **out);

/**
 * Loads a checkpoint written by `gazecal train` or [`gz_network_save`].
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * writable.
 */
enum GzStatus gz_network_load(const char *path, struct GzNetwork **out);

/**
 * # Safety
 * `network` must be null or a live handle; `path` a NUL-terminated string.
 */
enum GzStatus gz_network_save(const struct GzNetwork *network, const char *path);

/**
 * Releases a network handle. Null is ignored.
 *
 * # Safety
 * `network` must be null or a handle not yet freed.
 */
void gz_network_free(struct GzNetwork *network);

/**
 * # Safety
 * `network` must be null or a live handle; `out` null or writable.
 */
enum GzStatus gz_network_param_count(const struct GzNetwork *network, size_t *out);

/**
 * Predicts gaze points for `count` eye crops.
 *
 * `images` holds `count` crops of 60×36 grey pixels, row-major, already in
 * the left-eye frame (mirror right-eye crops and negate their yaw first).
 * `head_angles` holds `count` (yaw, pitch) pairs in radians. `out`
 * receives `count` (x, y) pairs in normalized screen coordinates.
 *
 * # Safety
 * Each pointer must be null or valid for the stated number of elements.
 */
enum GzStatus gz_network_predict(const struct GzNetwork *network,
                                 const uint8_t *images,
                                 const float *head_angles,
                                 size_t count,
                                 double *out);

/**
 * Loads every `.gzd` person file in a store directory.
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` null or writable.
 */
enum GzStatus gz_dataset_load(const char *path, struct GzDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle; `out` null or writable.
 */
enum GzStatus gz_dataset_person_count(const struct GzDataset *dataset, size_t *out);

/**
 * Number of samples of person `person` (store order).
 *
 * # Safety
 * `dataset` must be null or a live handle; `out` null or writable.
 */
enum GzStatus gz_dataset_sample_count(const struct GzDataset *dataset, size_t person, size_t *out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void gz_dataset_free(struct GzDataset *dataset);

/**
 * Mean Euclidean gaze error of `network` over every sample in `dataset`.
 *
 * # Safety
 * Handles must be null or live; `out` null or writable.
 */
enum GzStatus gz_evaluate(const struct GzNetwork *network,
                          const struct GzDataset *dataset,
                          struct GzErrorStats *out);

/**
 * Histogram-equalizes a `width`×`height` grey image into `out`.
 *
 * # Safety
 * `pixels` and `out` must be null or valid for `width * height` bytes.
 */
enum GzStatus gz_histogram_equalize(const uint8_t *pixels,
                                    uint32_t width,
                                    uint32_t height,
                                    uint8_t *out);

/**
 * Estimates the head pose from six landmarks of the generic face model.
 *
 * `points` holds six (u, v) pixel pairs in landmark order: right eye
 * outer, right eye inner, left eye inner, left eye outer, mouth right,
 * mouth left.
 *
 * # Safety
 * `points` must be null or valid for 12 values; `out` null or writable.
 */
enum GzStatus gz_estimate_head_pose(const double *points,
                                    double fx,
                                    double fy,
                                    double cx,
                                    double cy,
                                    struct GzPose *out);

/**
 * Converts a row-major head rotation into the (yaw, pitch) head angle
 * vector fed to the network.
 *
 * # Safety
 * `rotation` must be null or valid for 9 values; `out` for 2.
 */
enum GzStatus gz_head_angles(const double *rotation, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAZECAL_H */

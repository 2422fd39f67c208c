/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef AORTASEG_H
#define AORTASEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * `kind` argument meaning "take the kind stored in the file".
 */
#define AS_KIND_AUTO -1

#define AS_KIND_IMAGE 0

#define AS_KIND_LABEL 1

#define AS_MESH_STL 0

#define AS_MESH_OBJ 1

typedef enum AsStatus {
  AS_OK = 0,
  AS_ERR_NULL = 1,
  AS_ERR_INVALID_ARGUMENT = 2,
  AS_ERR_SHAPE = 3,
  AS_ERR_IO = 4,
  AS_ERR_FORMAT = 5,
  AS_ERR_EMPTY_FOREGROUND = 6,
  AS_ERR_DEGENERATE_RANGE = 7,
  AS_ERR_CONFIG = 8,
  AS_ERR_TRAINING = 9,
  AS_ERR_CHECKPOINT = 10,
  AS_ERR_UTF8 = 11,
  AS_ERR_PANIC = 12,
} AsStatus;

typedef struct AsEnsemble AsEnsemble;

typedef struct AsMesh AsMesh;

typedef struct AsVolume AsVolume;

typedef struct AsMeshStats {
  bool watertight;
  int64_t euler;
  double volume;
  double area;
  size_t n_components;
  size_t n_vertices;
  size_t n_triangles;
} AsMeshStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *as_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *as_version(void);

/**
 * Frees a string returned by this library.
 */
void as_string_free(char *s);

/**
 * Copies `shape[0] * shape[1] * shape[2]` floats (z fastest) into a new
 * volume. `origin` may be null (zero origin).
 */
enum AsStatus as_volume_new(const float *data,
                            const size_t *shape,
                            const double *spacing,
                            const double *origin,
                            int32_t kind,
                            struct AsVolume **out);

/**
 * Loads a `.nii`, `.nii.gz` or `.vol` file. `kind` is one of the
 * `AS_KIND_*` constants.
 */
enum AsStatus as_volume_load(const char *path, int32_t kind, struct AsVolume **out);

enum AsStatus as_volume_save(const struct AsVolume *vol, const char *path);

void as_volume_free(struct AsVolume *vol);

/**
 * Writes shape (3 values), spacing and origin (3 values each); any output
 * pointer may be null.
 */
enum AsStatus as_volume_geometry(const struct AsVolume *vol,
                                 size_t *shape,
                                 double *spacing,
                                 double *origin);

/**
 * Number of voxels, 0 for a null handle.
 */
size_t as_volume_len(const struct AsVolume *vol);

/**
 * Borrowed pointer to the voxel data (z fastest), valid while the handle
 * lives; null for a null handle.
 */
const float *as_volume_data(const struct AsVolume *vol);

/**
 * `AS_KIND_IMAGE` or `AS_KIND_LABEL`; -1 for a null handle.
 */
int32_t as_volume_kind(const struct AsVolume *vol);

/**
 * Trilinear (images) or nearest (labels) resampling to `target_spacing`.
 */
enum AsStatus as_resample(const struct AsVolume *vol,
                          const double *target_spacing,
                          struct AsVolume **out);

/**
 * Z-score normalization; `degenerate` (nullable) is set for constant input.
 */
enum AsStatus as_zscore(const struct AsVolume *vol, struct AsVolume **out, bool *degenerate);

double as_softclip(double v, double k);

/**
 * Soft-clip rescale of `vol` to the intensity window `[lo, hi]`.
 */
enum AsStatus as_softclip_rescale(const struct AsVolume *vol,
                                  double lo,
                                  double hi,
                                  double k,
                                  struct AsVolume **out);

enum AsStatus as_dice(const struct AsVolume *pred, const struct AsVolume *gt, double *out);

/**
 * HD95 in millimetres using the ground truth's spacing; `INFINITY` when
 * exactly one mask is empty.
 */
enum AsStatus as_hd95(const struct AsVolume *pred, const struct AsVolume *gt, double *out);

enum AsStatus as_largest_component(const struct AsVolume *mask, struct AsVolume **out);

/**
 * Case `index` of the phantom dataset generated from `seed`.
 */
enum AsStatus as_phantom_case(const size_t *shape,
                              uint64_t seed,
                              size_t index,
                              bool offset,
                              struct AsVolume **image,
                              struct AsVolume **label);

/**
 * Loads every `fold<F>_rep<R>/best.ckpt` under `ckpt_dir` with default
 * inference settings; `stage1_count` 0 keeps the default (5).
 */
enum AsStatus as_ensemble_load(const char *ckpt_dir,
                               size_t stage1_count,
                               bool paper_literal,
                               struct AsEnsemble **out);

/**
 * Number of (stage-1, stage-2) models.
 */
enum AsStatus as_ensemble_size(const struct AsEnsemble *ens, size_t *stage1, size_t *stage2);

/**
 * Two-stage prediction of a raw image. `report_json` (nullable) receives a
 * JSON report to be freed with `as_string_free`.
 */
enum AsStatus as_ensemble_predict(const struct AsEnsemble *ens,
                                  const struct AsVolume *raw,
                                  struct AsVolume **mask,
                                  char **report_json);

void as_ensemble_free(struct AsEnsemble *ens);

enum AsStatus as_mesh_from_mask(const struct AsVolume *mask,
                                size_t smooth_iters,
                                struct AsMesh **out);

enum AsStatus as_mesh_stats(const struct AsMesh *mesh, struct AsMeshStats *out);

/**
 * `format` is `AS_MESH_STL` or `AS_MESH_OBJ`.
 */
enum AsStatus as_mesh_save(const struct AsMesh *mesh, const char *path, int32_t format);

void as_mesh_free(struct AsMesh *mesh);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AORTASEG_H */

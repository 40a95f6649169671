#ifndef SPGCC_H
#define SPGCC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes. Values 1 to 12 mirror the library error kinds.
typedef enum SpgccStatus {
  SPGCC_STATUS_OK = 0,
  SPGCC_STATUS_DIMENSION = 1,
  SPGCC_STATUS_PARAMETER = 2,
  SPGCC_STATUS_BAD_MAGIC = 3,
  SPGCC_STATUS_TRUNCATED = 4,
  SPGCC_STATUS_TRAILING_BYTES = 5,
  SPGCC_STATUS_PAIR_MISMATCH = 6,
  SPGCC_STATUS_VALIDATION = 7,
  SPGCC_STATUS_NON_SCALAR_LOSS = 8,
  SPGCC_STATUS_MISSING_GRADIENT = 9,
  SPGCC_STATUS_MISSING_ARTIFACT = 10,
  SPGCC_STATUS_CONFIG = 11,
  SPGCC_STATUS_IO = 12,
  SPGCC_STATUS_NULL_ARGUMENT = 100,
  SPGCC_STATUS_INVALID_STRING = 101,
  SPGCC_STATUS_BUFFER_TOO_SMALL = 102,
  SPGCC_STATUS_PANIC = 103,
} SpgccStatus;

// Opaque pipeline configuration with its pending overrides.
typedef struct SpgccConfig SpgccConfig;

// Opaque hyperspectral cube.
typedef struct SpgccCube SpgccCube;

// Opaque label raster (ground truth or cluster map).
typedef struct SpgccLabels SpgccLabels;

// Opaque superpixel segmentation.
typedef struct SpgccSegmentation SpgccSegmentation;

// The nine clustering metrics, as percentages.
typedef struct SpgccMetrics {
  double oa;
  double aa;
  double kappa;
  double nmi;
  double ari;
  double f1;
  double precision;
  double recall;
  double purity;
} SpgccMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *spgcc_last_error(void);

// Library version as a static NUL-terminated string.
const char *spgcc_version(void);

// Copies `height * width * bands` pixel-major values into a new cube.
//
// # Safety
// `values` must point to that many readable doubles; `out` must be writable.
enum SpgccStatus spgcc_cube_new(size_t height,
                                size_t width,
                                size_t bands,
                                const double *values,
                                struct SpgccCube **out);

// Reads an HSIF file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SpgccStatus spgcc_cube_load(const char *path, struct SpgccCube **out);

// # Safety
// `cube` must be a live handle and `path` a NUL-terminated string.
enum SpgccStatus spgcc_cube_save(const struct SpgccCube *cube, const char *path);

// Writes the cube dimensions; any output pointer may be null.
//
// # Safety
// `cube` must be a live handle; non-null outputs must be writable.
enum SpgccStatus spgcc_cube_dims(const struct SpgccCube *cube,
                                 size_t *height,
                                 size_t *width,
                                 size_t *bands);

// # Safety
// `cube` must be null or a handle not yet freed.
void spgcc_cube_free(struct SpgccCube *cube);

// Copies `height * width` class ids (0 = unlabeled) into a new raster.
//
// # Safety
// `ids` must point to that many readable values; `out` must be writable.
enum SpgccStatus spgcc_labels_new(size_t height,
                                  size_t width,
                                  const uint32_t *ids,
                                  struct SpgccLabels **out);

// Reads an HSIL file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SpgccStatus spgcc_labels_load(const char *path, struct SpgccLabels **out);

// # Safety
// `labels` must be a live handle and `path` a NUL-terminated string.
enum SpgccStatus spgcc_labels_save(const struct SpgccLabels *labels, const char *path);

// # Safety
// `labels` must be a live handle; non-null outputs must be writable.
enum SpgccStatus spgcc_labels_dims(const struct SpgccLabels *labels, size_t *height, size_t *width);

// Copies the ids into `buf`, which must hold `height * width` values.
//
// # Safety
// `labels` must be a live handle; `buf` must have room for `len` values.
enum SpgccStatus spgcc_labels_copy(const struct SpgccLabels *labels, uint32_t *buf, size_t len);

// # Safety
// `labels` must be null or a handle not yet freed.
void spgcc_labels_free(struct SpgccLabels *labels);

// SLIC superpixels of `cube` with about `target` regions.
//
// # Safety
// `cube` must be a live handle; `out` must be writable.
enum SpgccStatus spgcc_segment(const struct SpgccCube *cube,
                               size_t target,
                               double compactness,
                               struct SpgccSegmentation **out);

// Number of superpixels, or 0 for a null handle.
//
// # Safety
// `seg` must be null or a live handle.
size_t spgcc_segmentation_count(const struct SpgccSegmentation *seg);

// Copies the per-pixel superpixel ids (`0..count`) into `buf`.
//
// # Safety
// `seg` must be a live handle; `buf` must have room for `len` values.
enum SpgccStatus spgcc_segmentation_copy(const struct SpgccSegmentation *seg,
                                         uint32_t *buf,
                                         size_t len);

// # Safety
// `seg` must be null or a handle not yet freed.
void spgcc_segmentation_free(struct SpgccSegmentation *seg);

// Scores `pred` against `truth` over pixels with a non-zero truth id.
//
// # Safety
// Both handles must be live; `out` must be writable.
enum SpgccStatus spgcc_compute_metrics(const struct SpgccLabels *pred,
                                       const struct SpgccLabels *truth,
                                       struct SpgccMetrics *out);

// Loads a TOML config; a null path selects the built-in desk config.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be writable.
enum SpgccStatus spgcc_config_load(const char *path, struct SpgccConfig **out);

// Sets a dotted key (e.g. `train.lr`) from its TOML or bare-string form.
// The configuration is unchanged if the result does not validate.
//
// # Safety
// `config` must be a live handle; `key` and `value` NUL-terminated strings.
enum SpgccStatus spgcc_config_set(struct SpgccConfig *config, const char *key, const char *value);

// Writes the resolved configuration as TOML into `buf` (NUL-terminated).
// `needed`, when non-null, receives the required size including the NUL.
//
// # Safety
// `config` must be a live handle; `buf` must have room for `len` bytes.
enum SpgccStatus spgcc_config_to_toml(const struct SpgccConfig *config,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

// Writes the synthetic scene into the configured output directory, using
// the configured seed and class count.
//
// # Safety
// `config` must be a live handle.
enum SpgccStatus spgcc_synth(const struct SpgccConfig *config,
                             size_t height,
                             size_t width,
                             size_t bands,
                             double noise);

// Runs every stage. When ground truth exists and `metrics` is non-null the
// scores are written there.
//
// # Safety
// `config` must be a live handle; `metrics` null or writable.
enum SpgccStatus spgcc_run_all(const struct SpgccConfig *config, struct SpgccMetrics *metrics);

// # Safety
// `config` must be null or a handle not yet freed.
void spgcc_config_free(struct SpgccConfig *config);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPGCC_H */

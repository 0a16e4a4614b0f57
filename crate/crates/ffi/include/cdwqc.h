#ifndef CDWQC_H
#define CDWQC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum cdwqc_artefact {
  CDWQC_ARTEFACT_MOTION = 0,
  CDWQC_ARTEFACT_NOISE = 1,
  CDWQC_ARTEFACT_CONTRAST = 2,
} cdwqc_artefact;

typedef enum cdwqc_severity {
  CDWQC_SEVERITY_MODERATE = 1,
  CDWQC_SEVERITY_SEVERE = 2,
} cdwqc_severity;

// Result of every fallible call.
typedef enum cdwqc_status {
  CDWQC_STATUS_OK = 0,
  CDWQC_STATUS_NULL_POINTER = 1,
  CDWQC_STATUS_INVALID_ARGUMENT = 2,
  CDWQC_STATUS_IO = 3,
  CDWQC_STATUS_INVALID_DATA = 4,
  CDWQC_STATUS_SHAPE_MISMATCH = 5,
  CDWQC_STATUS_NUMERIC = 6,
  CDWQC_STATUS_PANIC = 7,
} cdwqc_status;

// Opaque classifier restored from a checkpoint file.
typedef struct cdwqc_model cdwqc_model;

// Opaque 3D volume.
typedef struct cdwqc_volume cdwqc_volume;

// Outputs of the six artefact classifiers for one image.
typedef struct cdwqc_six_way {
  bool motion_severe;
  bool motion_moderate;
  bool contrast_severe;
  bool contrast_moderate;
  bool noise_0vs12;
  bool noise_0vs1;
} cdwqc_six_way;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL after a success.
//
// The pointer stays valid until the next call into the library on this thread.
const char *cdwqc_last_error(void);

// Library version as a static NUL-terminated string.
const char *cdwqc_version(void);

// Creates a volume from `nx*ny*nz` doubles in x-fastest order with unit spacing.
//
// # Safety
// `data` must point to `len` readable doubles and `out` to writable storage.
enum cdwqc_status cdwqc_volume_new(size_t nx,
                                   size_t ny,
                                   size_t nz,
                                   const double *data,
                                   size_t len,
                                   struct cdwqc_volume **out);

// Reads a NIfTI-1 file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum cdwqc_status cdwqc_volume_load(const char *path, struct cdwqc_volume **out);

// Writes a volume as NIfTI-1 (float32 voxels).
//
// # Safety
// `vol` must be a live handle and `path` a NUL-terminated string.
enum cdwqc_status cdwqc_volume_save(const struct cdwqc_volume *vol, const char *path);

// Writes the grid dimensions to `dims[0..3]`.
//
// # Safety
// `vol` must be a live handle and `dims` point to three writable values.
enum cdwqc_status cdwqc_volume_dims(const struct cdwqc_volume *vol, size_t *dims);

// Copies the voxels into `buf`, which must hold exactly the voxel count.
//
// # Safety
// `vol` must be a live handle and `buf` point to `len` writable doubles.
enum cdwqc_status cdwqc_volume_copy_data(const struct cdwqc_volume *vol, double *buf, size_t len);

// Releases a volume; NULL is ignored.
//
// # Safety
// `vol` must come from this library and not be used afterwards.
void cdwqc_volume_free(struct cdwqc_volume *vol);

// Applies a severity preset, writing a new volume to `out`.
//
// # Safety
// `vol` must be a live handle and `out` writable.
enum cdwqc_status cdwqc_simulate_preset(const struct cdwqc_volume *vol,
                                        enum cdwqc_artefact artefact,
                                        enum cdwqc_severity severity,
                                        uint64_t seed,
                                        struct cdwqc_volume **out);

// Average edge strength of the volume.
//
// # Safety
// `vol` must be a live handle and `out` writable.
enum cdwqc_status cdwqc_metric_aes(const struct cdwqc_volume *vol, double *out);

// Tenengrad sharpness of the volume.
//
// # Safety
// `vol` must be a live handle and `out` writable.
enum cdwqc_status cdwqc_metric_tenengrad(const struct cdwqc_volume *vol, double *out);

// Restores a classifier from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum cdwqc_status cdwqc_model_load(const char *path, struct cdwqc_model **out);

// Task name recorded in the checkpoint, or NULL if none.
//
// # Safety
// `model` must be a live handle; the string lives as long as the handle.
const char *cdwqc_model_task(const struct cdwqc_model *model);

// Probability of the positive class and the thresholded label for one volume.
//
// # Safety
// `model` and `vol` must be live handles; `probability` and `label` writable.
enum cdwqc_status cdwqc_model_predict(const struct cdwqc_model *model,
                                      const struct cdwqc_volume *vol,
                                      double *probability,
                                      bool *label);

// Releases a model; NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void cdwqc_model_free(struct cdwqc_model *model);

// Quality tier (1 good, 2 medium, 3 bad) for motion, noise and contrast grades in {0, 1, 2}.
//
// # Safety
// `tier` must be writable.
enum cdwqc_status cdwqc_grades_to_tier(uint8_t motion,
                                       uint8_t noise,
                                       uint8_t contrast,
                                       uint8_t *tier);

// Quality tier recombined from the six artefact classifier outputs.
//
// # Safety
// `flags` must point to a valid struct and `tier` be writable.
enum cdwqc_status cdwqc_recombine_tier(const struct cdwqc_six_way *flags, uint8_t *tier);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDWQC_H */

#ifndef FSB_H
#define FSB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum FsbStatus {
  FSB_STATUS_OK = 0,
  FSB_STATUS_NULL_POINTER = 1,
  FSB_STATUS_CONFIG = 2,
  FSB_STATUS_NUMERIC = 3,
  FSB_STATUS_SHAPE = 4,
  FSB_STATUS_IO = 5,
  FSB_STATUS_FORMAT = 6,
  FSB_STATUS_USAGE = 7,
  FSB_STATUS_PANIC = 8,
} FsbStatus;

/**
 * Pathway selector for [`fsb_engine_new`].
 */
typedef enum FsbMode {
  FSB_MODE_SERIAL = 0,
  FSB_MODE_FAST = 1,
} FsbMode;

/**
 * Pipeline engine with its own models and buffers.
 */
typedef struct FsbEngine FsbEngine;

/**
 * Trained projector bound to a barycentric map.
 */
typedef struct FsbProjector FsbProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fsb_version(void);

/**
 * Number of floats in a parameter vector.
 */
size_t fsb_pose_dim(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fsb_last_error(void);

/**
 * Builds models from `config_json` (null for defaults) and an engine for
 * `mode`. Serial mode ignores the config's pipeline section.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer to writable storage.
 */
enum FsbStatus fsb_engine_new(const char *config_json, enum FsbMode mode, struct FsbEngine **out);

/**
 * # Safety
 * `engine` must be null or a handle from [`fsb_engine_new`] not yet freed.
 */
void fsb_engine_free(struct FsbEngine *engine);

/**
 * Runs one frame of the synthetic scene `scene_seed`. Writes
 * [`fsb_pose_dim`] floats to `params`; `camera` (3 floats) and `total_ms`
 * may be null.
 *
 * # Safety
 * `engine` must be a live handle; the output pointers must be null (where
 * allowed) or point to enough writable storage.
 */
enum FsbStatus fsb_engine_run_synthetic(struct FsbEngine *engine,
                                        uint64_t scene_seed,
                                        float *params,
                                        float *camera,
                                        double *total_ms);

/**
 * Like [`fsb_engine_run_synthetic`] for a scene given as JSON text;
 * `seed` drives the detector stub's keypoint noise.
 *
 * # Safety
 * As for [`fsb_engine_run_synthetic`]; `scene_json` must be a
 * NUL-terminated string.
 */
enum FsbStatus fsb_engine_run_scene(struct FsbEngine *engine,
                                    const char *scene_json,
                                    uint64_t seed,
                                    float *params,
                                    float *camera,
                                    double *total_ms);

/**
 * Loads projector weights from `weights_json` and the source-to-target
 * map from `bary_json`; when `bary_json` is null the map comes from
 * models built with `config_json` (null for defaults).
 *
 * # Safety
 * String arguments must be null (where allowed) or NUL-terminated; `out`
 * must be a valid pointer to writable storage.
 */
enum FsbStatus fsb_projector_load(const char *weights_json,
                                  const char *bary_json,
                                  const char *config_json,
                                  struct FsbProjector **out);

/**
 * # Safety
 * `p` must be null or a handle from [`fsb_projector_load`] not yet freed.
 */
void fsb_projector_free(struct FsbProjector *p);

/**
 * Source vertex count the projector expects, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t fsb_projector_source_vertices(const struct FsbProjector *p);

/**
 * Converts one source mesh (`num_vertices × 3` floats, row-major) into
 * [`fsb_pose_dim`] target parameters.
 *
 * # Safety
 * `p` must be a live handle, `vertices` must hold `3 * num_vertices`
 * readable floats and `params` must have room for the output.
 */
enum FsbStatus fsb_projector_forward(struct FsbProjector *p,
                                     const float *vertices,
                                     size_t num_vertices,
                                     float *params);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSB_H */

#ifndef FLOWPAINT_H
#define FLOWPAINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Image planes of a scene.
 */
typedef enum FpPlane {
  /**
   * `[3, H, W]` source with tags.
   */
  FP_PLANE_IMAGE = 0,
  /**
   * `[1, H, W]`, 1 inside the region to inpaint.
   */
  FP_PLANE_MASK = 1,
  /**
   * `[3, H, W]` scene without tags.
   */
  FP_PLANE_CLEAN = 2,
} FpPlane;

/**
 * Result of every fallible call.
 */
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  /**
   * Null pointer, wrong buffer length or otherwise unusable argument.
   */
  FP_STATUS_INVALID_ARGUMENT = 1,
  FP_STATUS_CONFIG = 2,
  FP_STATUS_IO = 3,
  FP_STATUS_NUMERICAL = 4,
  /**
   * A panic was caught at the boundary.
   */
  FP_STATUS_INTERNAL = 5,
} FpStatus;

/**
 * Parsed and validated run configuration.
 */
typedef struct FpConfig FpConfig;

/**
 * Velocity network weights.
 */
typedef struct FpModel FpModel;

/**
 * One generated scene.
 */
typedef struct FpScene FpScene;

typedef struct FpRewards {
  double global;
  double local;
  double ocr;
} FpRewards;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fp_last_error(char *buf, size_t len);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum FpStatus fp_config_default(struct FpConfig **out);

/**
 * Parses a JSON configuration; missing fields take defaults, unknown fields
 * are rejected.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum FpStatus fp_config_from_json(const char *json, struct FpConfig **out);

/**
 * Image side length of scenes produced under `config`.
 *
 * # Safety
 * `config` must be a live handle; `out` writable.
 */
enum FpStatus fp_config_image_size(const struct FpConfig *config, size_t *out);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void fp_config_free(struct FpConfig *config);

/**
 * Generates the scene for `seed`.
 *
 * # Safety
 * `config` must be a live handle; `out` a valid handle slot.
 */
enum FpStatus fp_scene_generate(const struct FpConfig *config, uint64_t seed, struct FpScene **out);

/**
 * Number of floats in `plane` (an [`FpPlane`] value) of `scene`.
 *
 * # Safety
 * `scene` must be a live handle; `out` writable.
 */
enum FpStatus fp_scene_plane_len(const struct FpScene *scene, uint32_t plane, size_t *out);

/**
 * Copies `plane` into `buf`, which must hold exactly the plane's length.
 *
 * # Safety
 * `scene` must be a live handle; `buf` must point to `len` writable floats.
 */
enum FpStatus fp_scene_copy_plane(const struct FpScene *scene,
                                  uint32_t plane,
                                  float *buf,
                                  size_t len);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void fp_scene_free(struct FpScene *scene);

/**
 * Freshly initialised network for the architecture in `config`.
 *
 * # Safety
 * `config` must be a live handle; `out` a valid handle slot.
 */
enum FpStatus fp_model_new(const struct FpConfig *config, uint64_t seed, struct FpModel **out);

/**
 * Loads the network from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` a valid handle slot.
 */
enum FpStatus fp_model_load(const char *dir, struct FpModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fp_model_free(struct FpModel *model);

/**
 * Deterministic inpainting of `scene`, starting from init noise
 * `(noise_seed, noise_id)`. Writes the composited `[3, H, W]` result.
 *
 * # Safety
 * Handles must be live; `buf` must point to `len` writable floats.
 */
enum FpStatus fp_inpaint(const struct FpModel *model,
                         const struct FpConfig *config,
                         const struct FpScene *scene,
                         uint64_t noise_seed,
                         uint64_t noise_id,
                         bool matting,
                         float *buf,
                         size_t len);

/**
 * Global, local and OCR rewards of a `[3, H, W]` output for `scene`.
 *
 * # Safety
 * Handles must be live; `image` must point to `len` floats; `out` writable.
 */
enum FpStatus fp_rewards(const struct FpConfig *config,
                         const struct FpScene *scene,
                         const float *image,
                         size_t len,
                         struct FpRewards *out);

/**
 * PSNR in dB of a `[3, H, W]` output against the clean scene, over the mask.
 *
 * # Safety
 * `scene` must be live; `image` must point to `len` floats; `out` writable.
 */
enum FpStatus fp_psnr_mask(const struct FpScene *scene,
                           const float *image,
                           size_t len,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWPAINT_H */

/* C interface for the cam embedding-sequence models. */

#ifndef CAM_H
#define CAM_H

/* Generated by cbindgen from the cam-ffi crate; do not edit by hand. Regenerate with `cbindgen --config cbindgen.toml --output include/cam.h`. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result classes for every fallible call. The config/numeric/io split
 * matches the CLI's exit codes; the last two are boundary-specific.
 */
typedef enum cam_status {
  /**
   * Success; out-parameters are valid.
   */
  CAM_OK = 0,
  /**
   * Rejected input: bad dimensions, out-of-range options, corrupt config.
   */
  CAM_ERR_CONFIG = 2,
  /**
   * A computation produced a non-finite value.
   */
  CAM_ERR_NUMERIC = 3,
  /**
   * File i/o failed or a container failed validation.
   */
  CAM_ERR_IO = 4,
  /**
   * A required pointer argument was null.
   */
  CAM_ERR_NULL_ARG = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  CAM_ERR_PANIC = 6,
} cam_status;

/**
 * How imperfect samples are fed back during generation.
 */
typedef enum cam_injection {
  /**
   * fed = k*eps + (1-k)*x, the same map training augments with.
   */
  CAM_INJECTION_CONVEX = 0,
  /**
   * fed = x + k*eps.
   */
  CAM_INJECTION_ADDITIVE = 1,
} cam_injection;

/**
 * An embedding dataset serving as the reference distribution.
 */
typedef struct cam_dataset cam_dataset;

/**
 * A trained model loaded from a checkpoint file.
 */
typedef struct cam_model cam_model;

/**
 * A batch of generated or file-loaded embedding traces.
 */
typedef struct cam_traces cam_traces;

/**
 * Options for [`cam_generate`]. Obtain defaults from
 * [`cam_generate_opts_default`] and override fields as needed.
 */
typedef struct cam_generate_opts {
  /**
   * Master seed; fixed seed plus fixed options gives bit-identical traces.
   */
  uint64_t seed;
  /**
   * Number of traces sampled in lockstep. Must be positive.
   */
  size_t num_traces;
  /**
   * Frames per trace. Must be positive.
   */
  size_t target_length;
  /**
   * Solver steps per frame for flow/diffusion heads; ignored by GMM heads.
   */
  size_t num_steps_denoise;
  /**
   * Sliding context in frames; 0 means the model's full context.
   */
  size_t context_window;
  /**
   * Noise level re-injected into fed-back samples, in [0, 1].
   */
  double k_inf;
  /**
   * GMM sampling temperature; ignored by flow/diffusion heads.
   */
  double temperature;
  /**
   * Feedback map for `k_inf`.
   */
  enum cam_injection injection;
} cam_generate_opts;

/**
 * Options for [`cam_fed`]. Obtain defaults from [`cam_fed_opts_default`].
 */
typedef struct cam_fed_opts {
  /**
   * Frames per scored window; traces must be at least twice this long.
   */
  size_t window;
  /**
   * Windows drawn from the reference to fit the reference Gaussian.
   */
  size_t reference_windows;
  /**
   * Trace windows per bootstrap draw. Must exceed the feature
   * dimension, which is five times the embedding dimension.
   */
  size_t background_windows;
  /**
   * Bootstrap draws averaged into each score.
   */
  size_t draws;
  /**
   * Seed for the feature projection and all window sampling.
   */
  uint64_t feature_seed;
} cam_fed_opts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string; never null.
 */
const char *cam_version(void);

/**
 * Message for the most recent failure on the calling thread, or null if no
 * call has failed yet. The pointer stays valid until the next failure on
 * the same thread.
 */
const char *cam_last_error(void);

/**
 * Load a model from a checkpoint file written by the `cam` trainer.
 *
 * # Safety
 * `path` must be a valid nul-terminated C string; `out` must be a valid
 * pointer. On `CAM_OK`, `*out` owns the model until [`cam_model_free`].
 */
enum cam_status cam_model_load(const char *path, struct cam_model **out);

/**
 * Release a model. Accepts null.
 *
 * # Safety
 * `model` must be null or an unfreed pointer from [`cam_model_load`].
 */
void cam_model_free(struct cam_model *model);

/**
 * Embedding dimension the model consumes and produces; 0 for null.
 *
 * # Safety
 * `model` must be null or a valid [`cam_model`] pointer.
 */
size_t cam_model_input_dim(const struct cam_model *model);

/**
 * Total trainable parameters; 0 for null.
 *
 * # Safety
 * `model` must be null or a valid [`cam_model`] pointer.
 */
uint64_t cam_model_param_count(const struct cam_model *model);

/**
 * Training objective as a static string ("cam", "mar_rf", ...); null for a
 * null model.
 *
 * # Safety
 * `model` must be null or a valid [`cam_model`] pointer.
 */
const char *cam_model_objective(const struct cam_model *model);

/**
 * Generation defaults: one trace of 128 frames, 20 solver steps, no
 * injected noise, temperature 0.9, convex feedback, full context, seed 0.
 */
struct cam_generate_opts cam_generate_opts_default(void);

/**
 * Sample traces from a loaded model. Passing null options uses
 * [`cam_generate_opts_default`].
 *
 * # Safety
 * `model` must be a valid [`cam_model`] pointer, `opts` null or a valid
 * pointer, and `out` a valid pointer. On `CAM_OK`, `*out` owns the traces
 * until [`cam_traces_free`].
 */
enum cam_status cam_generate(const struct cam_model *model,
                             const struct cam_generate_opts *opts,
                             struct cam_traces **out);

/**
 * Release traces. Accepts null.
 *
 * # Safety
 * `traces` must be null or an unfreed pointer from [`cam_generate`] or
 * [`cam_traces_read`].
 */
void cam_traces_free(struct cam_traces *traces);

/**
 * Number of traces in the batch; 0 for null.
 *
 * # Safety
 * `traces` must be null or a valid [`cam_traces`] pointer.
 */
size_t cam_traces_count(const struct cam_traces *traces);

/**
 * Embedding dimension of the traces; 0 for null or an empty batch.
 *
 * # Safety
 * `traces` must be null or a valid [`cam_traces`] pointer.
 */
size_t cam_traces_dim(const struct cam_traces *traces);

/**
 * Number of frames in trace `index`; 0 for null or out of range.
 *
 * # Safety
 * `traces` must be null or a valid [`cam_traces`] pointer.
 */
size_t cam_traces_length(const struct cam_traces *traces, size_t index);

/**
 * Borrow the frames of trace `index` as a flat row-major array of
 * `length * dim` floats. The pointer stays valid until the batch is freed.
 *
 * # Safety
 * `traces` must be a valid [`cam_traces`] pointer; `out_ptr` and `out_len`
 * must be valid pointers.
 */
enum cam_status cam_traces_frames(const struct cam_traces *traces,
                                  size_t index,
                                  const float **out_ptr,
                                  size_t *out_len);

/**
 * Write the traces to an embedding container file. Round-trips bit-exactly
 * through [`cam_traces_read`].
 *
 * # Safety
 * `traces` must be a valid [`cam_traces`] pointer and `path` a valid
 * nul-terminated C string.
 */
enum cam_status cam_traces_save(const struct cam_traces *traces, const char *path);

/**
 * Load an embedding container file as a trace batch, e.g. for scoring
 * previously saved generations with [`cam_fed`].
 *
 * # Safety
 * `path` must be a valid nul-terminated C string; `out` must be a valid
 * pointer. On `CAM_OK`, `*out` owns the traces until [`cam_traces_free`].
 */
enum cam_status cam_traces_read(const char *path, struct cam_traces **out);

/**
 * Load an embedding container file as a reference dataset.
 *
 * # Safety
 * `path` must be a valid nul-terminated C string; `out` must be a valid
 * pointer. On `CAM_OK`, `*out` owns the dataset until [`cam_dataset_free`].
 */
enum cam_status cam_dataset_read(const char *path, struct cam_dataset **out);

/**
 * Release a dataset. Accepts null.
 *
 * # Safety
 * `dataset` must be null or an unfreed pointer from [`cam_dataset_read`].
 */
void cam_dataset_free(struct cam_dataset *dataset);

/**
 * Number of sequences in the dataset; 0 for null.
 *
 * # Safety
 * `dataset` must be null or a valid [`cam_dataset`] pointer.
 */
size_t cam_dataset_count(const struct cam_dataset *dataset);

/**
 * Embedding dimension of the dataset; 0 for null.
 *
 * # Safety
 * `dataset` must be null or a valid [`cam_dataset`] pointer.
 */
size_t cam_dataset_dim(const struct cam_dataset *dataset);

/**
 * Scoring defaults for the given window size and seed: 4096 reference
 * windows, 512 background windows, 5 bootstrap draws.
 */
struct cam_fed_opts cam_fed_opts_default(size_t window, uint64_t feature_seed);

/**
 * Fréchet embedding distance of the traces against a reference dataset.
 * `out_fed` scores the first `window` frames of each trace, `out_fed_acc`
 * the second, so their gap measures degradation as generation proceeds.
 *
 * # Safety
 * `traces` and `reference` must be valid handle pointers, `opts` null or a
 * valid pointer (null uses `cam_fed_opts_default(16, 0)`), and `out_fed`
 * and `out_fed_acc` valid pointers.
 */
enum cam_status cam_fed(const struct cam_traces *traces,
                        const struct cam_dataset *reference,
                        const struct cam_fed_opts *opts,
                        double *out_fed,
                        double *out_fed_acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAM_H */

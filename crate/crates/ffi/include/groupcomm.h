#ifndef GROUPCOMM_H
#define GROUPCOMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcStatus {
  GC_STATUS_OK = 0,
  GC_STATUS_NULL_POINTER = 1,
  GC_STATUS_INVALID_ARGUMENT = 2,
  GC_STATUS_CONFIG = 3,
  GC_STATUS_SHAPE = 4,
  GC_STATUS_INPUT_TOO_SHORT = 5,
  GC_STATUS_CHECKPOINT = 6,
  GC_STATUS_IO = 7,
  GC_STATUS_WAV = 8,
  GC_STATUS_RUNTIME = 9,
  GC_STATUS_PANIC = 10,
} GcStatus;

/**
 * Opaque model handle.
 */
typedef struct GcModel GcModel;

/**
 * Mirror of the model hyperparameters. `block_hop == 0` means automatic.
 */
typedef struct GcModelConfig {
  size_t groups;
  size_t group_size;
  size_t filters;
  size_t hidden_in;
  size_t hidden_out;
  size_t depth;
  size_t window;
  size_t stride;
  size_t speakers;
  uint32_t sample_rate;
  size_t block_hop;
  bool inter_bidirectional;
} GcModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into this library.
 */
const char *gc_last_error(void);

/**
 * The ungrouped reference configuration.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GcStatus gc_config_baseline(struct GcModelConfig *out);

/**
 * Row `index` (0..12, baseline first) of the reference comparison grid.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GcStatus gc_config_table2(size_t index, struct GcModelConfig *out);

/**
 * # Safety
 * `config` must point to a valid struct and `out` must be valid for writes.
 */
enum GcStatus gc_count_params(const struct GcModelConfig *config, uint64_t *out);

/**
 * MACs for `seconds` of input at the config's sample rate.
 *
 * # Safety
 * `config` must point to a valid struct and `out` must be valid for writes.
 */
enum GcStatus gc_count_macs(const struct GcModelConfig *config, double seconds, uint64_t *out);

/**
 * Freshly initialised model.
 *
 * # Safety
 * `config` must point to a valid struct and `out` must be valid for writes.
 */
enum GcStatus gc_model_new(const struct GcModelConfig *config, uint64_t seed, struct GcModel **out);

/**
 * Loads a checkpoint written by the CLI `train` command together with its
 * run-config sidecar.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid for writes.
 */
enum GcStatus gc_model_load(const char *checkpoint, const char *config, struct GcModel **out);

/**
 * Writes the model's parameters in checkpoint format.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum GcStatus gc_model_save(const struct GcModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is
 * accepted and ignored.
 */
void gc_model_free(struct GcModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid for writes.
 */
enum GcStatus gc_model_config(const struct GcModel *model, struct GcModelConfig *out);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid for writes.
 */
enum GcStatus gc_model_num_params(const struct GcModel *model, uint64_t *out);

/**
 * Separates `len` samples into `speakers × len` row-major output.
 * `output_len` must equal `speakers · len`.
 *
 * # Safety
 * `input` must hold `len` values and `output` room for `output_len`.
 */
enum GcStatus gc_model_separate(const struct GcModel *model,
                                const double *input,
                                size_t len,
                                double *output,
                                size_t output_len);

/**
 * Scale-invariant SDR in dB.
 *
 * # Safety
 * Both buffers must hold `len` values; `out` must be valid for writes.
 */
enum GcStatus gc_si_sdr(const double *estimate, const double *reference, size_t len, double *out);

/**
 * Signal-to-noise ratio in dB.
 *
 * # Safety
 * Both buffers must hold `len` values; `out` must be valid for writes.
 */
enum GcStatus gc_snr(const double *estimate, const double *reference, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUPCOMM_H */

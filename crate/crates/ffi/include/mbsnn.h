#ifndef MBSNN_H
#define MBSNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbsnnStatus {
  MBSNN_STATUS_OK = 0,
  MBSNN_STATUS_NULL_POINTER = 1,
  MBSNN_STATUS_INVALID_ARGUMENT = 2,
  MBSNN_STATUS_SHAPE = 3,
  MBSNN_STATUS_NUMERIC = 4,
  MBSNN_STATUS_STATE = 5,
  MBSNN_STATUS_PARSE = 6,
  MBSNN_STATUS_IO = 7,
  MBSNN_STATUS_CONFIG = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  MBSNN_STATUS_INTERNAL = 9,
} MbsnnStatus;

/**
 * Opaque model handle.
 */
typedef struct MbsnnModel MbsnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mbsnn_version(void);

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *mbsnn_last_error(void);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MbsnnStatus mbsnn_model_load(const char *path, struct MbsnnModel **out);

/**
 * Decodes a model from an in-memory model file.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum MbsnnStatus mbsnn_model_load_bytes(const uint8_t *bytes, size_t len, struct MbsnnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `mbsnn_model_load*` and not be used afterwards.
 */
void mbsnn_model_free(struct MbsnnModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum MbsnnStatus mbsnn_model_num_classes(const struct MbsnnModel *model, size_t *out);

/**
 * Number of values in one input sample.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum MbsnnStatus mbsnn_model_input_len(const struct MbsnnModel *model, size_t *out);

/**
 * Runs `batch` samples (row-major, `batch * input_len` values) and writes
 * `batch * num_classes` logits. `time_steps = 0` uses the model's own.
 *
 * # Safety
 * `input` must hold `batch * input_len` values and `logits` have room
 * for `logits_len` values.
 */
enum MbsnnStatus mbsnn_model_forward(const struct MbsnnModel *model,
                                     const double *input,
                                     size_t batch,
                                     size_t time_steps,
                                     double *logits,
                                     size_t logits_len);

/**
 * Entropy in bits of spikes quantized from a Gaussian membrane potential.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MbsnnStatus mbsnn_spike_entropy(double v_th,
                                     double mean,
                                     double std,
                                     uint32_t int_bits,
                                     uint32_t frac_bits,
                                     double *out);

/**
 * Quantizes `len` membrane potentials to spike codes; the spike value is
 * `code * 2^-frac_bits`.
 *
 * # Safety
 * `u` must hold `len` values and `codes` have room for `len` values.
 */
enum MbsnnStatus mbsnn_fire_quantize(const double *u,
                                     size_t len,
                                     double v_th,
                                     uint32_t int_bits,
                                     uint32_t frac_bits,
                                     uint32_t *codes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBSNN_H */

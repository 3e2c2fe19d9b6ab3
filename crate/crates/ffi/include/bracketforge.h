#ifndef BRACKETFORGE_H
#define BRACKETFORGE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 3 to 8 match the CLI exit codes.
 */
typedef enum {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_ARGUMENT = 1,
  BF_STATUS_INVALID_ARGUMENT = 2,
  BF_STATUS_CONFIG = 3,
  BF_STATUS_IO = 4,
  BF_STATUS_FORMAT = 5,
  BF_STATUS_CAPABILITY = 6,
  BF_STATUS_CONTRACT = 7,
  BF_STATUS_NON_FINITE = 8,
  BF_STATUS_PANIC = 9,
} BfStatus;

typedef enum {
  BF_LAMBDA_MODE_CONSTANT = 0,
  BF_LAMBDA_MODE_TIME_QUADRATIC = 1,
} BfLambdaMode;

typedef struct BfHdr BfHdr;

typedef struct BfModel BfModel;

typedef struct BfStack BfStack;

/**
 * Sampling options. `evs == NULL` selects the default -4,-2,0,2,4 stack,
 * `steps == 0` the model's full schedule and a negative `lambda0` the
 * default strength of the chosen mode.
 */
typedef struct {
  const double *evs;
  size_t n_evs;
  size_t steps;
  BfLambdaMode lambda_mode;
  double lambda0;
  uint64_t seed;
  bool serial;
} BfSampleOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bf_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one for the terminator.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t bf_last_error(char *buf, size_t len);

/**
 * Maps linear values to encoded values in place.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `values` valid for `n` doubles.
 */
BfStatus bf_crf_apply(const char *spec, double *values, size_t n);

/**
 * Maps encoded values in `[0, 1]` back to linear values in place.
 *
 * # Safety
 * As for [`bf_crf_apply`].
 */
BfStatus bf_crf_invert(const char *spec, double *values, size_t n);

/**
 * PSNR in dB between two equally long buffers of values in `[0, 1]`.
 *
 * # Safety
 * `a` and `b` must be valid for `n` doubles, `out` for one.
 */
BfStatus bf_psnr(const double *a, const double *b, size_t n, double *out);

/**
 * Opens a model from a backend spec such as `toy:<file>` or
 * `analytic:gauss:mu=0.5,var=0.04`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `out` writable.
 */
BfStatus bf_model_open(const char *spec, BfModel **out);

/**
 * Native resolution of the model.
 *
 * # Safety
 * `model` must come from [`bf_model_open`]; the out pointers must be writable.
 */
BfStatus bf_model_shape(const BfModel *model, size_t *height, size_t *width, size_t *channels);

/**
 * # Safety
 * `model` must come from [`bf_model_open`] and not be used afterwards.
 */
void bf_model_free(BfModel *model);

/**
 * Defaults: five brackets, full schedule, time-quadratic strength.
 */
BfSampleOptions bf_sample_options_default(void);

/**
 * Samples a bracket stack with the model at its native resolution.
 *
 * # Safety
 * `model` must come from [`bf_model_open`], `options` must be readable and
 * its `evs` valid for `n_evs` doubles when non-null.
 */
BfStatus bf_sample(const BfModel *model, const BfSampleOptions *options, BfStack **out);

/**
 * Builds a stack from `n` brackets stored back to back in `pixels`.
 *
 * # Safety
 * `evs` must be valid for `n` doubles, `pixels` for
 * `n * height * width * channels`, and `out` writable.
 */
BfStatus bf_stack_new(const double *evs,
                      size_t n,
                      size_t height,
                      size_t width,
                      size_t channels,
                      const double *pixels,
                      BfStack **out);

/**
 * Reads `<stem>_ev<±x>.png` brackets from a directory; `stem` may be null
 * when the directory holds a single stack.
 *
 * # Safety
 * `dir` must be a NUL-terminated string, `stem` one or null, `out` writable.
 */
BfStatus bf_stack_read(const char *dir, const char *stem, BfStack **out);

/**
 * Writes the stack as 8-bit PNGs named `<stem>_ev<±x>.png`.
 *
 * # Safety
 * `stack` must be a live handle; `dir` and `stem` NUL-terminated strings.
 */
BfStatus bf_stack_write(const BfStack *stack, const char *dir, const char *stem);

/**
 * Number of brackets, or 0 for a null handle.
 *
 * # Safety
 * `stack` must be a live handle or null.
 */
size_t bf_stack_len(const BfStack *stack);

/**
 * # Safety
 * `stack` must be a live handle; the out pointers must be writable.
 */
BfStatus bf_stack_shape(const BfStack *stack, size_t *height, size_t *width, size_t *channels);

/**
 * Exposure value of bracket `index` and a copy of its pixels. `pixels` may
 * be null to query only the exposure value.
 *
 * # Safety
 * `stack` must be a live handle, `ev` writable and `pixels` valid for `len`
 * doubles when non-null.
 */
BfStatus bf_stack_bracket(const BfStack *stack,
                          size_t index,
                          double *ev,
                          double *pixels,
                          size_t len);

/**
 * Bracket-consistency PSNR of the stack in dB.
 *
 * # Safety
 * `stack` must be a live handle, `crf` a NUL-terminated string and `out`
 * writable.
 */
BfStatus bf_consistency_psnr(const BfStack *stack, const char *crf, double *out);

/**
 * # Safety
 * `stack` must be a live handle or null and not be used afterwards.
 */
void bf_stack_free(BfStack *stack);

/**
 * Merges the stack into linear radiance with the default hat weights.
 *
 * # Safety
 * `stack` must be a live handle, `crf` a NUL-terminated string and `out`
 * writable.
 */
BfStatus bf_merge(const BfStack *stack, const char *crf, BfHdr **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
BfStatus bf_hdr_read_pfm(const char *path, BfHdr **out);

/**
 * # Safety
 * `hdr` must be a live handle and `path` a NUL-terminated string.
 */
BfStatus bf_hdr_write_pfm(const BfHdr *hdr, const char *path);

/**
 * # Safety
 * `hdr` must be a live handle; the out pointers must be writable.
 */
BfStatus bf_hdr_shape(const BfHdr *hdr, size_t *height, size_t *width, size_t *channels);

/**
 * Copies the radiance into `pixels`, which must hold exactly
 * `height * width * channels` doubles.
 *
 * # Safety
 * `hdr` must be a live handle and `pixels` valid for `len` doubles.
 */
BfStatus bf_hdr_pixels(const BfHdr *hdr, double *pixels, size_t len);

/**
 * Ratio of the largest to the smallest nonzero radiance.
 *
 * # Safety
 * `hdr` must be a live handle and `out` writable.
 */
BfStatus bf_hdr_dynamic_range(const BfHdr *hdr, double *out);

/**
 * # Safety
 * `hdr` must be a live handle or null and not be used afterwards.
 */
void bf_hdr_free(BfHdr *hdr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRACKETFORGE_H */

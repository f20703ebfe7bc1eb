#ifndef DSS_H
#define DSS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2 to 4 match the command-line exit codes.
typedef enum DssStatus {
  DSS_STATUS_OK = 0,
  DSS_STATUS_NULL_POINTER = 1,
  DSS_STATUS_CONFIG_ERROR = 2,
  DSS_STATUS_DATA_ERROR = 3,
  DSS_STATUS_NUMERICAL_ERROR = 4,
  DSS_STATUS_PANIC = 5,
} DssStatus;

// Opaque separator instance.
typedef struct DssHandle DssHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty after a
// success. Valid until the next call on the same thread.
const char *dss_last_error(void);

// Loads a checkpoint file. On success `*out` owns a handle that must be
// released with [`dss_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DssStatus dss_model_load(const char *path, struct DssHandle **out);

// Releases a handle; null is ignored.
//
// # Safety
// `handle` must come from [`dss_model_load`] and not be used afterwards.
void dss_model_free(struct DssHandle *handle);

// Number of scalar weights in the model, 0 for a null handle.
//
// # Safety
// `handle` must be null or a live handle.
uint64_t dss_model_num_params(const struct DssHandle *handle);

// Separates `len` samples of 16 kHz mono audio. Both outputs receive
// `len` samples.
//
// # Safety
// `input` must hold `len` readable floats; `out_near` and `out_far` must
// each hold `len` writable floats.
enum DssStatus dss_separate(const struct DssHandle *handle,
                            const float *input,
                            size_t len,
                            float *out_near,
                            float *out_far);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSS_H */

/* C interface to the bhpm library. */

#ifndef BHPM_H
#define BHPM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define BHPM_OK 0

#define BHPM_ERR_NULL_POINTER 1

#define BHPM_ERR_INVALID_ARGUMENT 2

#define BHPM_ERR_IO 3

#define BHPM_ERR_NUMERICAL 4

/**
 * Opaque handle to a loaded model.
 */
typedef struct BhpmModelHandle BhpmModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the thread-local message for the most recent error into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length,
 * excluding the terminator.
 */
size_t bhpm_last_error(char *buf, size_t len);

/**
 * Load a model saved by the `train` command from `dir` (UTF-8 path to the
 * model directory). On success writes a handle to `out` which must be
 * released with `bhpm_model_free`.
 */
int32_t bhpm_model_load(const char *dir, struct BhpmModelHandle **out);

/**
 * Release a model handle. Passing NULL is a no-op.
 */
void bhpm_model_free(struct BhpmModelHandle *handle);

/**
 * Spatial derivative order K of the learned operator. The root's input
 * dimension is K + 1 (the bundle u, u_x, ..., d^K u/dx^K).
 */
int32_t bhpm_model_order(const struct BhpmModelHandle *handle, size_t *out);

/**
 * Posterior of the learned operator at `n` derivative bundles.
 *
 * `v` is row-major n-by-dim where dim = K + 1; `mean` and `variance` are
 * caller-allocated arrays of length `n` (variance may be NULL if not
 * wanted).
 */
int32_t bhpm_root_predict(const struct BhpmModelHandle *handle,
                          const double *v,
                          size_t n,
                          size_t dim,
                          double *mean,
                          double *variance);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bhpm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BHPM_H */

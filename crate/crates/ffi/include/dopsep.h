#ifndef DOPSEP_H
#define DOPSEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DopsepStatus {
  DopsepStatus_Ok = 0,
  DopsepStatus_NullArgument = 1,
  DopsepStatus_InvalidArgument = 2,
  DopsepStatus_DimensionMismatch = 3,
  DopsepStatus_NonFinite = 4,
  DopsepStatus_Linalg = 5,
  DopsepStatus_Io = 6,
  DopsepStatus_Format = 7,
  DopsepStatus_Panic = 8,
} DopsepStatus;

/**
 * Opaque convolution kernel handle.
 */
typedef struct DopsepPsf DopsepPsf;

/**
 * Opaque separation result: blood, tissue, optional kernel, solver trace.
 */
typedef struct DopsepResult DopsepResult;

/**
 * Opaque complex stack handle (Casorati-ordered samples plus geometry).
 */
typedef struct DopsepStack DopsepStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dopsep_last_error(void);

/**
 * Builds a stack from `2 * nz * nx * nt` doubles laid out as described in
 * the module header. The buffer is copied.
 *
 * # Safety
 * `data` must point to at least `2 * nz * nx * nt` readable doubles and
 * `out` must be a valid destination pointer.
 */
enum DopsepStatus dopsep_stack_create(uintptr_t nz,
                                      uintptr_t nx,
                                      uintptr_t nt,
                                      const double *data,
                                      struct DopsepStack **out);

/**
 * # Safety
 * `stack` must be a live handle; non-null outputs must be writable.
 */
enum DopsepStatus dopsep_stack_dims(const struct DopsepStack *stack,
                                    uintptr_t *nz,
                                    uintptr_t *nx,
                                    uintptr_t *nt);

/**
 * Copies the stack back out in creation order. `out` must hold
 * `2 * nz * nx * nt` doubles.
 *
 * # Safety
 * `stack` must be a live handle and `out` writable at that size.
 */
enum DopsepStatus dopsep_stack_copy_data(const struct DopsepStack *stack, double *out);

/**
 * # Safety
 * `stack` must come from this library and not have been freed already.
 * Null is a no-op.
 */
void dopsep_stack_free(struct DopsepStack *stack);

/**
 * Builds an energy-normalized kernel from `2 * rows * cols` doubles
 * (row-major pairs). `center_z`, `center_x` locate the kernel origin tap.
 *
 * # Safety
 * `data` must point to `2 * rows * cols` readable doubles, `out` writable.
 */
enum DopsepStatus dopsep_psf_create(uintptr_t rows,
                                    uintptr_t cols,
                                    uintptr_t center_z,
                                    uintptr_t center_x,
                                    const double *data,
                                    struct DopsepPsf **out);

/**
 * # Safety
 * `psf` must be a live handle; non-null outputs must be writable.
 */
enum DopsepStatus dopsep_psf_dims(const struct DopsepPsf *psf,
                                  uintptr_t *rows,
                                  uintptr_t *cols,
                                  uintptr_t *center_z,
                                  uintptr_t *center_x);

/**
 * Copies the kernel out as row-major pairs; `out` must hold
 * `2 * rows * cols` doubles.
 *
 * # Safety
 * `psf` must be a live handle and `out` writable at that size.
 */
enum DopsepStatus dopsep_psf_copy_data(const struct DopsepPsf *psf, double *out);

/**
 * # Safety
 * `psf` must come from this library and not have been freed already.
 * Null is a no-op.
 */
void dopsep_psf_free(struct DopsepPsf *psf);

/**
 * Reference sparsity weight and penalty for a stack of the given size.
 * `mu_multiplier` is 10 for the plain decomposition, 2 for the
 * deconvolution-aware one.
 *
 * # Safety
 * Non-null outputs must be writable.
 */
enum DopsepStatus dopsep_reference_params(uintptr_t nz,
                                          uintptr_t nx,
                                          uintptr_t nt,
                                          double mu_multiplier,
                                          double *lambda,
                                          double *mu);

/**
 * Rank-band filter: blood keeps singular components `tc..=tb` (1-based),
 * tissue keeps `1..tc`.
 *
 * # Safety
 * `stack` must be a live handle and `out` writable.
 */
enum DopsepStatus dopsep_svd_filter(const struct DopsepStack *stack,
                                    uintptr_t tc,
                                    uintptr_t tb,
                                    struct DopsepResult **out);

/**
 * Sparse-plus-low-rank decomposition.
 *
 * # Safety
 * `stack` must be a live handle and `out` writable.
 */
enum DopsepStatus dopsep_rpca(const struct DopsepStack *stack,
                              double lambda,
                              double rho,
                              double mu,
                              double tol,
                              uintptr_t max_iter,
                              struct DopsepResult **out);

/**
 * Deconvolution-aware decomposition with a known blur kernel.
 *
 * # Safety
 * `stack` and `psf` must be live handles and `out` writable.
 */
enum DopsepStatus dopsep_drpca(const struct DopsepStack *stack,
                               const struct DopsepPsf *psf,
                               double lambda,
                               double rho,
                               double mu,
                               double tol,
                               uintptr_t max_iter,
                               struct DopsepResult **out);

/**
 * Blind variant with reference defaults for the stack's size. `psf` may be
 * null; a non-null kernel skips blind estimation and is used directly.
 *
 * # Safety
 * `stack` must be a live handle, `psf` null or live, `out` writable.
 */
enum DopsepStatus dopsep_bdrpca(const struct DopsepStack *stack,
                                const struct DopsepPsf *psf,
                                struct DopsepResult **out);

/**
 * Returns a new stack handle holding the blood estimate.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum DopsepStatus dopsep_result_blood(const struct DopsepResult *result, struct DopsepStack **out);

/**
 * Returns a new stack handle holding the tissue estimate.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum DopsepStatus dopsep_result_tissue(const struct DopsepResult *result, struct DopsepStack **out);

/**
 * Returns the kernel attached to the result, or sets `*out` to null when
 * the method produced none.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum DopsepStatus dopsep_result_psf(const struct DopsepResult *result, struct DopsepPsf **out);

/**
 * # Safety
 * `result` must be a live handle; non-null outputs must be writable.
 */
enum DopsepStatus dopsep_result_iterations(const struct DopsepResult *result, uintptr_t *out);

/**
 * # Safety
 * `result` must be a live handle; non-null outputs must be writable.
 */
enum DopsepStatus dopsep_result_trace_len(const struct DopsepResult *result, uintptr_t *out);

/**
 * Reads one trace entry: the constraint residual and composite objective
 * after iteration `index`.
 *
 * # Safety
 * `result` must be a live handle; non-null outputs must be writable.
 */
enum DopsepStatus dopsep_result_trace_at(const struct DopsepResult *result,
                                         uintptr_t index,
                                         double *primal_residual,
                                         double *objective);

/**
 * # Safety
 * `result` must come from this library and not have been freed already.
 * Null is a no-op.
 */
void dopsep_result_free(struct DopsepResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOPSEP_H */

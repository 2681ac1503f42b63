#ifndef NMODE_H
#define NMODE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum NmodeStatus {
  NMODE_STATUS_OK = 0,
  NMODE_STATUS_NULL_POINTER = 1,
  NMODE_STATUS_INVALID_ARGUMENT = 2,
  NMODE_STATUS_DIMENSION = 3,
  NMODE_STATUS_NUMERICAL = 4,
  NMODE_STATUS_IO = 5,
  NMODE_STATUS_CONFIG = 6,
  NMODE_STATUS_INCOMPATIBLE = 7,
  NMODE_STATUS_MISSING_ARTIFACT = 8,
  NMODE_STATUS_PANIC = 9,
} NmodeStatus;

/**
 * Truncated modal basis of a linear system.
 */
typedef struct NmodeBasis NmodeBasis;

/**
 * Trained model: architecture, basis and parameters.
 */
typedef struct NmodeModel NmodeModel;

/**
 * Structural system: mass, damping, stiffness and cubic spring.
 */
typedef struct NmodeSystem NmodeSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call on this thread.
 */
const char *nmode_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nmode_version(void);

/**
 * The built-in four-storey frame with cubic coefficient `cubic`.
 *
 * # Safety
 * `out` must be a valid pointer to writable handle storage.
 */
enum NmodeStatus nmode_system_frame_4dof(double cubic, struct NmodeSystem **out);

/**
 * A system from row-major `dof × dof` matrices. The cubic force
 * `cubic·x₁³` enters equation `cubic_equation` (zero-based).
 *
 * # Safety
 * Each matrix pointer must reference `dof*dof` readable doubles and `out`
 * must be a valid pointer to writable handle storage.
 */
enum NmodeStatus nmode_system_new(const double *mass,
                                  const double *damping,
                                  const double *stiffness,
                                  uintptr_t dof,
                                  double cubic,
                                  uintptr_t cubic_equation,
                                  struct NmodeSystem **out);

/**
 * # Safety
 * `sys` must be NULL or a handle from this library not yet freed.
 */
void nmode_system_free(struct NmodeSystem *sys);

/**
 * Number of degrees of freedom.
 *
 * # Safety
 * `sys` must be a live handle and `dof` writable.
 */
enum NmodeStatus nmode_system_dof(const struct NmodeSystem *sys, uintptr_t *dof);

/**
 * Integrates the full nonlinear system from `(x0, v0)` for `steps`
 * intervals of `dt` (RK4 with `substeps` sub-steps) and writes the
 * `(steps+1) × dof` displacement, velocity and acceleration histories.
 * Any of the outputs may be NULL when its length is zero.
 *
 * # Safety
 * `x0`, `v0` must reference `dof` doubles; each output must reference `len`
 * writable doubles where `len = (steps+1)*dof`.
 */
enum NmodeStatus nmode_simulate(const struct NmodeSystem *sys,
                                const double *x0,
                                const double *v0,
                                double dt,
                                uintptr_t steps,
                                uintptr_t substeps,
                                double *disp,
                                double *vel,
                                double *acc,
                                uintptr_t len);

/**
 * The `modes` lowest modes of the linear part of `sys`.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable handle storage.
 */
enum NmodeStatus nmode_modal_basis(const struct NmodeSystem *sys,
                                   uintptr_t modes,
                                   struct NmodeBasis **out);

/**
 * # Safety
 * `basis` must be NULL or a handle from this library not yet freed.
 */
void nmode_basis_free(struct NmodeBasis *basis);

/**
 * Natural frequencies (rad/s) and damping ratios, `modes` values each, and
 * the mass-normalized mode shapes as a row-major `dof × modes` matrix.
 * Pass NULL with length zero to skip an output.
 *
 * # Safety
 * `basis` must be a live handle; each non-NULL output must reference the
 * stated number of writable doubles.
 */
enum NmodeStatus nmode_basis_get(const struct NmodeBasis *basis,
                                 double *omegas,
                                 uintptr_t omegas_len,
                                 double *xis,
                                 uintptr_t xis_len,
                                 double *phi,
                                 uintptr_t phi_len);

/**
 * Number of retained modes and degrees of freedom.
 *
 * # Safety
 * `basis` must be a live handle; `modes` and `dof` must be writable.
 */
enum NmodeStatus nmode_basis_shape(const struct NmodeBasis *basis,
                                   uintptr_t *modes,
                                   uintptr_t *dof);

/**
 * Loads a trained model. `config_path` is the run configuration (NULL for
 * defaults, typically the `effective_config.json` echoed by the run) and
 * `checkpoint_path` the checkpoint written by training.
 *
 * # Safety
 * Paths must be NULL-terminated strings (`config_path` may be NULL) and
 * `out` writable handle storage.
 */
enum NmodeStatus nmode_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct NmodeModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void nmode_model_free(struct NmodeModel *model);

/**
 * Measured channels `m`, encoder window length `n_t + 1`, and degrees of
 * freedom `dof` of the reconstruction.
 *
 * # Safety
 * `model` must be a live handle and the outputs writable.
 */
enum NmodeStatus nmode_model_shape(const struct NmodeModel *model,
                                   uintptr_t *channels,
                                   uintptr_t *window,
                                   uintptr_t *dof);

/**
 * Reconstructs the full field for `steps` intervals from a measured
 * window (`rows × channels`, row-major, `rows ≥ n_t + 1`) using the mean
 * initial state. Outputs are `(steps+1) × dof`.
 *
 * # Safety
 * `window` must reference `rows*channels` doubles and each output `len`
 * writable doubles.
 */
enum NmodeStatus nmode_model_reconstruct(const struct NmodeModel *model,
                                         const double *window,
                                         uintptr_t rows,
                                         uintptr_t channels,
                                         uintptr_t steps,
                                         double *disp,
                                         double *vel,
                                         double *acc,
                                         uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMODE_H */

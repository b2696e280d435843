#ifndef IONTRACK_H
#define IONTRACK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IontrackStatus {
  IONTRACK_STATUS_OK = 0,
  IONTRACK_STATUS_NULL_ARGUMENT = 1,
  IONTRACK_STATUS_INVALID_ARGUMENT = 2,
  IONTRACK_STATUS_PARSE = 3,
  IONTRACK_STATUS_OUT_OF_RANGE = 4,
  IONTRACK_STATUS_FIT_FAILED = 5,
  IONTRACK_STATUS_NOT_FOUND = 6,
  IONTRACK_STATUS_PANIC = 99,
} IontrackStatus;

/**
 * Result of an ODMR fit.
 */
typedef struct IontrackFit IontrackFit;

/**
 * Stopping-power table with the default radial dose kernel.
 */
typedef struct IontrackStopping IontrackStopping;

typedef struct IontrackCensus {
  /**
   * Expected visible chains in the field.
   */
  double expected;
  /**
   * Visible chains per cm².
   */
  double areal_density_cm2;
  /**
   * Central 95% Poisson interval.
   */
  double interval_low;
  double interval_high;
} IontrackCensus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next iontrack call on the same thread.
 */
const char *iontrack_last_error_message(void);

/**
 * Copies the last error message into `buf` (NUL-terminated). Returns the
 * message length without the terminator, or -1 when `buf` is too small.
 * A null `buf` just reports the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
int iontrack_copy_last_error(char *buf, size_t len);

/**
 * Library version as a static string.
 */
const char *iontrack_version(void);

/**
 * Runs a command-line invocation (arguments without the program name) and
 * returns its exit code.
 *
 * # Safety
 * `argv` must point to `argc` valid NUL-terminated strings.
 */
int iontrack_run(int argc, const char *const *argv);

/**
 * Built-in stopping table: "U" or "Au".
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IontrackStatus iontrack_stopping_builtin(const char *name,
                                              struct IontrackStopping **out_handle);

/**
 * Stopping table parsed from its text form.
 *
 * # Safety
 * `text_ptr` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IontrackStatus iontrack_stopping_parse(const char *text_ptr,
                                            struct IontrackStopping **out_handle);

/**
 * # Safety
 * `h` must be null or a handle from this library not yet freed.
 */
void iontrack_stopping_free(struct IontrackStopping *h);

/**
 * Projected range in µm.
 *
 * # Safety
 * `h` must be a live handle and `range_um` a valid pointer.
 */
enum IontrackStatus iontrack_stopping_range(const struct IontrackStopping *h, double *range_um);

/**
 * Electronic and nuclear stopping (keV/nm) at depth `z_um`.
 *
 * # Safety
 * `h` must be a live handle; output pointers must be valid.
 */
enum IontrackStatus iontrack_stopping_at(const struct IontrackStopping *h,
                                         double z_um,
                                         double *electronic,
                                         double *nuclear);

/**
 * Radial dose (eV/nm³) at radius `r_nm` from the path, at depth `z_um`.
 *
 * # Safety
 * `h` must be a live handle and `dose` a valid pointer.
 */
enum IontrackStatus iontrack_radial_dose(const struct IontrackStopping *h,
                                         double z_um,
                                         double r_nm,
                                         double *dose);

/**
 * Fits an ODMR trace. `model` is one of "esr", "rabi", "t1", "hahn";
 * `peaks` is used by "esr" only.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `model` must be NUL-terminated;
 * `out` must be valid.
 */
enum IontrackStatus iontrack_odmr_fit(const char *model,
                                      size_t peaks,
                                      const double *x,
                                      const double *y,
                                      size_t n,
                                      struct IontrackFit **out_handle);

/**
 * # Safety
 * `h` must be null or a handle from this library not yet freed.
 */
void iontrack_fit_free(struct IontrackFit *h);

/**
 * Number of fitted parameters, 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t iontrack_fit_param_count(const struct IontrackFit *h);

/**
 * Name of parameter `i`, valid while the handle lives; null if out of range.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
const char *iontrack_fit_param_name(const struct IontrackFit *h, size_t i);

/**
 * Value and 1σ uncertainty of the named parameter. `sigma` may be null.
 *
 * # Safety
 * `h` must be a live handle, `name` NUL-terminated, `value` valid.
 */
enum IontrackStatus iontrack_fit_param(const struct IontrackFit *h,
                                       const char *name,
                                       double *value,
                                       double *sigma);

/**
 * True when the optimizer converged and no reliability flag was raised.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
bool iontrack_fit_reliable(const struct IontrackFit *h);

/**
 * Fit as a JSON document. Release with [`iontrack_string_free`].
 *
 * # Safety
 * `h` must be a live handle and `json` a valid pointer.
 */
enum IontrackStatus iontrack_fit_to_json(const struct IontrackFit *h, char **json);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void iontrack_string_free(char *s);

/**
 * Expected visible NV chains for a fluence (cm⁻²), field area (µm²) and
 * detection efficiency in [0, 1].
 *
 * # Safety
 * `census` must be a valid pointer.
 */
enum IontrackStatus iontrack_chain_census(double fluence_cm2,
                                          double area_um2,
                                          double detection,
                                          struct IontrackCensus *census);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IONTRACK_H */

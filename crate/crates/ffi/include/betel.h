#ifndef BETEL_H
#define BETEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum BetelStatus {
  BETEL_STATUS_OK = 0,
  BETEL_STATUS_NULL_POINTER = 1,
  BETEL_STATUS_INVALID_ARGUMENT = 2,
  BETEL_STATUS_CONFIG = 3,
  BETEL_STATUS_NUMERIC = 4,
  BETEL_STATUS_INFEASIBLE = 5,
  BETEL_STATUS_IO = 6,
  BETEL_STATUS_PANIC = 7,
} BetelStatus;

typedef enum BetelVerdict {
  BETEL_VERDICT_EXOGENOUS = 0,
  BETEL_VERDICT_ENDOGENOUS = 1,
} BetelVerdict;

/*
 Opaque dataset handle.
 */
typedef struct BetelDataset BetelDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *betel_version(void);

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *betel_last_error_message(void);

/*
 Loads a CSV file. `schema_json` names the columns, for example
 `{"y": "y", "x": ["x"], "z1": ["const", "z1"], "z2": ["z2"]}`.

 # Safety
 `path` and `schema_json` must be NUL-terminated strings and `out` a valid
 pointer.
 */
enum BetelStatus betel_dataset_load_csv(const char *path,
                                        const char *schema_json,
                                        struct BetelDataset **out);

/*
 Draws a dataset from a data generating process given as JSON, for example
 `{"n": 500, "rho": 0.5, "seed": 1}`.

 # Safety
 `dgp_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BetelStatus betel_dataset_simulate(const char *dgp_json, struct BetelDataset **out);

/*
 Builds a dataset from column-major arrays of `n` rows; `x`, `z1` and `z2`
 have `dx`, `dz1` and `dz2` columns.

 # Safety
 Each array must hold `n` times its column count doubles.
 */
enum BetelStatus betel_dataset_from_arrays(size_t n,
                                           const double *y,
                                           const double *x,
                                           size_t dx,
                                           const double *z1,
                                           size_t dz1,
                                           const double *z2,
                                           size_t dz2,
                                           struct BetelDataset **out);

/*
 Number of rows, or 0 for a null handle.

 # Safety
 `ds` must be null or a live handle.
 */
size_t betel_dataset_n(const struct BetelDataset *ds);

/*
 Releases a dataset; null is ignored.

 # Safety
 `ds` must be null or a handle not yet freed.
 */
void betel_dataset_free(struct BetelDataset *ds);

/*
 Bayes-factor endogeneity test. `options_json` may be null or hold
 `{"prior": ..., "fit": ...}`.

 # Safety
 `ds` must be a live handle, `options_json` null or a NUL-terminated
 string, and the out pointers valid.
 */
enum BetelStatus betel_test_endogeneity(const struct BetelDataset *ds,
                                        const char *options_json,
                                        double *out_log_bf,
                                        enum BetelVerdict *out_verdict);

/*
 Ranks every endogeneity mask by marginal likelihood; the report is
 written to `out_json`.

 # Safety
 As for `betel_test_endogeneity`; free the result with `betel_string_free`.
 */
enum BetelStatus betel_select_models(const struct BetelDataset *ds,
                                     const char *options_json,
                                     char **out_json);

/*
 GMM-BIC, AIC and HQIC over every endogeneity mask; the report is
 written to `out_json`.

 # Safety
 `ds` must be a live handle and `out_json` valid; free the result with
 `betel_string_free`.
 */
enum BetelStatus betel_gmm_msc(const struct BetelDataset *ds, char **out_json);

/*
 Releases a string returned by this library; null is ignored.

 # Safety
 `s` must be null or a string from this library not yet freed.
 */
void betel_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BETEL_H */

#ifndef DIGEBENCH_H
#define DIGEBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgStatus {
  DG_STATUS_OK = 0,
  DG_STATUS_INVALID_INPUT = 1,
  DG_STATUS_SHAPE = 2,
  DG_STATUS_NON_FINITE = 3,
  DG_STATUS_IO = 4,
  DG_STATUS_BAD_MAGIC = 5,
  DG_STATUS_VERSION_MISMATCH = 6,
  DG_STATUS_TRUNCATED = 7,
  DG_STATUS_SCHEMA = 8,
  DG_STATUS_UNDEFINED = 9,
  DG_STATUS_UNSATISFIABLE = 10,
  DG_STATUS_NON_CONVERGENCE = 11,
  DG_STATUS_DEGENERATE = 12,
  DG_STATUS_CONFIG = 13,
  DG_STATUS_NULL_POINTER = 14,
  DG_STATUS_PANIC = 15,
} DgStatus;

typedef struct DgCohort DgCohort;

typedef struct DgMilModel DgMilModel;

typedef struct DgOperatingPoint {
  double threshold;
  double target_sensitivity;
  double achieved_sensitivity;
  double achieved_specificity;
  size_t calibration_n;
} DgOperatingPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call on the same thread.
 */
const char *dg_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *dg_version(void);

/*
 Loads a cohort from its JSONL manifest.
 */
enum DgStatus dg_cohort_load(const char *manifest, struct DgCohort **out);

void dg_cohort_free(struct DgCohort *cohort);

/*
 Number of slides, 0 for a null handle.
 */
size_t dg_cohort_len(const struct DgCohort *cohort);

size_t dg_cohort_dim(const struct DgCohort *cohort);

size_t dg_cohort_n_patches(const struct DgCohort *cohort, size_t slide);

enum DgStatus dg_mil_model_load(const char *file, struct DgMilModel **out);

void dg_mil_model_free(struct DgMilModel *model);

size_t dg_mil_model_n_classes(const struct DgMilModel *model);

/*
 Writes the class probabilities of one slide into `out` (length
 `n_classes`).
 */
enum DgStatus dg_mil_predict(const struct DgMilModel *model,
                             const struct DgCohort *cohort,
                             size_t slide,
                             double *out,
                             size_t n_classes);

/*
 Writes the attention weights of one slide into `out` (length
 `n_patches`), in the slide's patch order.
 */
enum DgStatus dg_mil_attention(const struct DgMilModel *model,
                               const struct DgCohort *cohort,
                               size_t slide,
                               double *out,
                               size_t n_patches);

/*
 Cox negative log partial likelihood; `grad` (length `n`) may be null.
 */
enum DgStatus dg_cox_loss(const double *theta,
                          const double *times,
                          const uint8_t *events,
                          size_t n,
                          double *loss,
                          double *grad);

enum DgStatus dg_c_index(const double *theta,
                         const double *times,
                         const uint8_t *events,
                         size_t n,
                         double *out);

enum DgStatus dg_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/*
 Tumor and non-tumor ROI budgets for slide probability `p_tumor`.
 */
enum DgStatus dg_roi_budgets(double p_tumor, size_t *n_tumor, size_t *n_nontumor);

enum DgStatus dg_chi_square_sf(double x, uint32_t df, double *out);

enum DgStatus dg_calibrate_threshold(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double target_sensitivity,
                                     struct DgOperatingPoint *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIGEBENCH_H */

#ifndef DRMECH_H
#define DRMECH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrmechStatus {
  DRMECH_STATUS_OK = 0,
  DRMECH_STATUS_NULL_POINTER = 1,
  DRMECH_STATUS_INVALID_PARAM = 2,
  DRMECH_STATUS_RECRUITMENT_SHORTFALL = 3,
  DRMECH_STATUS_STRUCTURE = 4,
  DRMECH_STATUS_DEGENERATE = 5,
  DRMECH_STATUS_DRAW_OUT_OF_RANGE = 6,
  DRMECH_STATUS_UNKNOWN_AGENT = 7,
  DRMECH_STATUS_BUFFER_TOO_SMALL = 8,
  DRMECH_STATUS_PANIC = 9,
} DrmechStatus;

/*
 An experiment configuration parsed from JSON.
 */
typedef struct DrmechExperiment DrmechExperiment;

/*
 A pod structure built from truthful or strategic reports.
 */
typedef struct DrmechPods DrmechPods;

/*
 Market constants, units as in the field names.
 */
typedef struct DrmechParams {
  double pi_e_usd_per_kwh;
  double pi_o_usd_per_agent;
  double pi_max_usd_per_kwh;
  double target_kwh;
  uint32_t events_per_contract;
} DrmechParams;

/*
 Population moments: E[b], E[pi], E[1/pi].
 */
typedef struct DrmechStats {
  double e_b;
  double e_pi;
  double e_inv_pi;
} DrmechStats;

typedef struct DrmechBounds {
  double phi_min;
  double phi_bo_upper;
  double phi_srbm_upper;
  double e_m_upper;
  double e_n_upper;
} DrmechBounds;

/*
 Replication-averaged results. `phi_upper` is NaN when the mechanism has
 no closed-form bound.
 */
typedef struct DrmechSummary {
  double mean_phi;
  double ci_halfwidth_phi;
  double mean_n;
  double mean_m;
  double competitive_ratio;
  double phi_min;
  double phi_upper;
  double min_delivered;
  size_t replications;
} DrmechSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *drmech_version(void);

/*
 Copies the calling thread's last error message into `buf` (NUL
 terminated, truncated to `len`). Returns the full message length.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t drmech_last_error(char *buf, size_t len);

/*
 Closed-form bounds for the given constants.

 # Safety
 Pointers must be null or valid.
 */
enum DrmechStatus drmech_bounds(const struct DrmechParams *params,
                                const struct DrmechStats *stats,
                                double pi_max_usd_per_kwh,
                                struct DrmechBounds *out);

/*
 Parses and validates an experiment config.

 # Safety
 `json` must be a NUL-terminated string; `out` must be valid.
 */
enum DrmechStatus drmech_experiment_from_json(const char *json, struct DrmechExperiment **out);

/*
 # Safety
 `h` must be a live handle.
 */
enum DrmechStatus drmech_experiment_set_seed(struct DrmechExperiment *h, uint64_t seed);

/*
 # Safety
 `h` must be a live handle.
 */
enum DrmechStatus drmech_experiment_set_replications(struct DrmechExperiment *h,
                                                     size_t replications);

/*
 Runs the experiment, or its first sweep point if it has a sweep.

 # Safety
 `h` must be a live handle and `out` valid.
 */
enum DrmechStatus drmech_experiment_run(const struct DrmechExperiment *h,
                                        struct DrmechSummary *out);

/*
 # Safety
 `h` must be null or a handle not yet freed.
 */
void drmech_experiment_free(struct DrmechExperiment *h);

/*
 Sorts `n` reports (agent ids `0..n`) into SRBM pods.

 # Safety
 `f` and `mu` must be valid for `n` reads; `out` must be valid.
 */
enum DrmechStatus drmech_pods_sort(const double *f,
                                   const double *mu,
                                   size_t n,
                                   double target_kwh,
                                   double pi_e_usd_per_kwh,
                                   struct DrmechPods **out);

/*
 Number of selectable pods, or 0 for a null handle.

 # Safety
 `h` must be null or a live handle.
 */
size_t drmech_pods_count(const struct DrmechPods *h);

/*
 Reward price and call probability of agent `id`; both zero when the
 agent is never called.

 # Safety
 `h` must be a live handle; outputs must be valid.
 */
enum DrmechStatus drmech_pods_member(const struct DrmechPods *h,
                                     size_t id,
                                     double *reward_price,
                                     double *probability);

/*
 Ids called for draw `u`, ascending. Writes at most `cap` ids and the
 full count to `n_out`; returns `BufferTooSmall` if `cap` is short.

 # Safety
 `ids` must be valid for `cap` writes; `h` and `n_out` must be valid.
 */
enum DrmechStatus drmech_pods_select(const struct DrmechPods *h,
                                     double u,
                                     size_t *ids,
                                     size_t cap,
                                     size_t *n_out);

/*
 # Safety
 `h` must be null or a handle not yet freed.
 */
void drmech_pods_free(struct DrmechPods *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRMECH_H */

#ifndef MEDVR_H
#define MEDVR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MedvrStatus {
  MEDVR_STATUS_OK = 0,
  MEDVR_STATUS_ERR_NULL_POINTER = 1,
  MEDVR_STATUS_ERR_INVALID_ARGUMENT = 2,
  MEDVR_STATUS_ERR_EMPTY_BOX = 3,
  MEDVR_STATUS_ERR_NON_FINITE = 4,
  MEDVR_STATUS_ERR_NO_TOOL_TOKENS = 5,
  MEDVR_STATUS_ERR_DIMENSION_MISMATCH = 6,
  MEDVR_STATUS_ERR_INCONSISTENT_GATE = 7,
  MEDVR_STATUS_ERR_CONFIG = 8,
  MEDVR_STATUS_ERR_INSUFFICIENT_DATA = 9,
  MEDVR_STATUS_ERR_POLICY_UNAVAILABLE = 10,
  MEDVR_STATUS_ERR_PROTOCOL = 11,
  MEDVR_STATUS_ERR_IO = 12,
  MEDVR_STATUS_ERR_BUDGET = 13,
  MEDVR_STATUS_ERR_PANIC = 99,
} MedvrStatus;

/**
 * Trajectories of one rollout group awaiting consensus credit assignment.
 */
typedef struct MedvrCcaGroup MedvrCcaGroup;

/**
 * A training run of the built-in policy on synthetic tasks.
 */
typedef struct MedvrTrainer MedvrTrainer;

/**
 * Half-open pixel box `[x0, x1) x [y0, y1)`.
 */
typedef struct MedvrBox {
  int32_t x0;
  int32_t y0;
  int32_t x1;
  int32_t y1;
} MedvrBox;

typedef struct MedvrReward {
  double r_acc;
  double r_format;
  double r_tool;
  double total;
} MedvrReward;

typedef struct MedvrIterationStats {
  uint64_t iteration;
  double mean_reward;
  double mean_r_acc;
  double mean_r_tool;
  double format_violation_rate;
  double mean_tool_calls;
  uint64_t generated_tokens;
  uint64_t shared_prefix_tokens;
  uint64_t branches;
  uint64_t degenerate_groups;
  double loss;
} MedvrIterationStats;

typedef struct MedvrEvalMetrics {
  uint64_t n_tasks;
  double accuracy;
  double mean_iou_vs_gt;
  double mean_tool_calls;
  double mean_extra_tokens;
} MedvrEvalMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next call into this library on the same thread.
 */
const char *medvr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *medvr_version(void);

/**
 * Shannon entropy (nats) of `softmax(logits / temperature)`.
 *
 * # Safety
 * `logits` must point to `n` doubles; `out` must be writable.
 */
enum MedvrStatus medvr_token_entropy(const double *logits,
                                     size_t n,
                                     double temperature,
                                     double *out_h);

/**
 * `clamp(p_base + gamma * delta_h, 0, 1)`.
 *
 * # Safety
 * `out_p` must be writable.
 */
enum MedvrStatus medvr_branch_probability(double delta_h,
                                          double p_base,
                                          double gamma,
                                          double *out_p);

/**
 * Orders, clamps and checks a box against a `width x height` image.
 *
 * # Safety
 * `out_box` must be writable.
 */
enum MedvrStatus medvr_validate_box(struct MedvrBox b,
                                    uint32_t width,
                                    uint32_t height,
                                    struct MedvrBox *out_box);

/**
 * Pixel IoU of two boxes rasterized on a `width x height` grid; 0 when
 * both are empty.
 *
 * # Safety
 * `out_iou` must be writable.
 */
enum MedvrStatus medvr_box_iou(struct MedvrBox a,
                               struct MedvrBox b,
                               uint32_t width,
                               uint32_t height,
                               double *out_iou);

/**
 * Terminal reward `r_acc + r_format + [r_acc > 0] * r_tool`.
 *
 * # Safety
 * `out_reward` must be writable.
 */
enum MedvrStatus medvr_compose_reward(double r_acc,
                                      bool format_ok,
                                      double r_tool,
                                      struct MedvrReward *out_reward);

/**
 * New empty group on a `width x height` image. Returns NULL on invalid
 * dimensions.
 */
struct MedvrCcaGroup *medvr_cca_group_new(uint32_t width, uint32_t height);

/**
 * # Safety
 * `group` must come from [`medvr_cca_group_new`] and not be used again.
 */
void medvr_cca_group_free(struct MedvrCcaGroup *group);

/**
 * Adds a trajectory whose footprint is the union of `n_boxes` executed
 * zoom boxes (zero boxes means no tool use).
 *
 * # Safety
 * `group` must be a live handle; `boxes` must point to `n_boxes` boxes.
 */
enum MedvrStatus medvr_cca_group_add(struct MedvrCcaGroup *group,
                                     const struct MedvrBox *boxes,
                                     size_t n_boxes,
                                     double r_acc);

/**
 * Number of trajectories added so far; 0 for NULL.
 *
 * # Safety
 * `group` must be NULL or a live handle.
 */
size_t medvr_cca_group_len(const struct MedvrCcaGroup *group);

/**
 * Computes `r_tool` for every trajectory, in insertion order. `out_iou`
 * may be NULL; otherwise it receives the IoU against the consensus, or
 * NaN where none applies. `out_consensus_pixels` may be NULL; it receives
 * the consensus size, or -1 without a consensus.
 *
 * # Safety
 * `group` must be a live handle; output arrays must hold `n` doubles,
 * where `n` equals [`medvr_cca_group_len`].
 */
enum MedvrStatus medvr_cca_group_assign(const struct MedvrCcaGroup *group,
                                        double eta,
                                        double success_threshold,
                                        double *out_r_tool,
                                        double *out_iou,
                                        size_t n,
                                        int64_t *out_consensus_pixels);

/**
 * Builds a trainer from config file text (same format as the CLI).
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out_trainer` writable.
 */
enum MedvrStatus medvr_trainer_new(const char *config_text, struct MedvrTrainer **out_trainer);

/**
 * # Safety
 * `trainer` must come from [`medvr_trainer_new`] and not be used again.
 */
void medvr_trainer_free(struct MedvrTrainer *trainer);

/**
 * True once the configured iteration count is reached.
 *
 * # Safety
 * `trainer` must be NULL or a live handle.
 */
bool medvr_trainer_is_done(const struct MedvrTrainer *trainer);

/**
 * Runs one training iteration. `out_stats` may be NULL.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum MedvrStatus medvr_trainer_step(struct MedvrTrainer *trainer,
                                    struct MedvrIterationStats *out_stats);

/**
 * Greedy evaluation on `n_tasks` held-out tasks.
 *
 * # Safety
 * `trainer` must be a live handle; `out_metrics` writable.
 */
enum MedvrStatus medvr_trainer_evaluate(const struct MedvrTrainer *trainer,
                                        size_t n_tasks,
                                        struct MedvrEvalMetrics *out_metrics);

/**
 * Writes a checkpoint readable by the CLI (`eval --checkpoint`).
 *
 * # Safety
 * `trainer` must be a live handle; `path` a NUL-terminated string.
 */
enum MedvrStatus medvr_trainer_save_checkpoint(const struct MedvrTrainer *trainer,
                                               const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEDVR_H */

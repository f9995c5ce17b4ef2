#ifndef GLIMPSE_H
#define GLIMPSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlimpseEpisodeStatus {
  GLIMPSE_EPISODE_STATUS_RUNNING = 0,
  GLIMPSE_EPISODE_STATUS_ANSWERED = 1,
  GLIMPSE_EPISODE_STATUS_TRUNCATED_TURNS = 2,
  GLIMPSE_EPISODE_STATUS_TRUNCATED_CONTEXT = 3,
  GLIMPSE_EPISODE_STATUS_PROTOCOL_ERROR = 4,
} GlimpseEpisodeStatus;

typedef enum GlimpseStatus {
  GLIMPSE_STATUS_OK = 0,
  GLIMPSE_STATUS_NULL_POINTER = 1,
  GLIMPSE_STATUS_INVALID_ARGUMENT = 2,
  GLIMPSE_STATUS_SCENE_ERROR = 3,
  GLIMPSE_STATUS_ENV_ERROR = 4,
  GLIMPSE_STATUS_POLICY_ERROR = 5,
  GLIMPSE_STATUS_EVAL_ERROR = 6,
  GLIMPSE_STATUS_PANIC = 7,
} GlimpseStatus;

typedef struct GlimpseEpisode GlimpseEpisode;

typedef struct GlimpsePolicy GlimpsePolicy;

typedef struct GlimpseScene GlimpseScene;

typedef struct GlimpseEpisodeInfo {
  uint32_t turn;
  int32_t status;
  uint32_t observations;
  uint64_t tokens_used;
  uint64_t visual_tokens;
  /**
   * Active per-view budget, 0 when unconstrained.
   */
  uint32_t budget;
} GlimpseEpisodeInfo;

typedef struct GlimpseMetrics {
  double accuracy;
  double all_direct_ratio;
  double all_focus_ratio;
  double mean_turns;
  uint64_t visual_tokens_total;
} GlimpseMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread. Valid until the next failing
 * call on the same thread.
 */
const char *glimpse_last_error(void);

/**
 * Per-view token budget for a `width x height` image under the default law.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GlimpseStatus glimpse_budget_for_dims(uint32_t width, uint32_t height, uint32_t *out);

/**
 * Generate the default scene for `seed`. `num_classes` of 0 keeps the
 * default class count.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GlimpseStatus glimpse_scene_new(uint64_t seed,
                                     uint32_t num_classes,
                                     struct GlimpseScene **out);

/**
 * # Safety
 * `scene` must come from [`glimpse_scene_new`] and not be used afterwards.
 */
void glimpse_scene_free(struct GlimpseScene *scene);

/**
 * Gold answer; the pointer lives as long as the scene.
 *
 * # Safety
 * `scene` must be a live scene handle or null.
 */
const char *glimpse_scene_gold(const struct GlimpseScene *scene);

/**
 * Query text; the pointer lives as long as the scene.
 *
 * # Safety
 * `scene` must be a live scene handle or null.
 */
const char *glimpse_scene_query(const struct GlimpseScene *scene);

/**
 * Start an episode on `scene`. `budget_override` of 0 uses the
 * resolution-conditioned budget.
 *
 * # Safety
 * `scene` must be a live scene handle and `out` valid for writes.
 */
enum GlimpseStatus glimpse_episode_new(const struct GlimpseScene *scene,
                                       bool constrained,
                                       uint32_t budget_override,
                                       uint32_t max_turns,
                                       struct GlimpseEpisode **out);

/**
 * # Safety
 * `episode` must come from [`glimpse_episode_new`] and not be used afterwards.
 */
void glimpse_episode_free(struct GlimpseEpisode *episode);

/**
 * Request crops of `n_boxes` boxes given as `[x1, y1, x2, y2]` quadruples
 * in overview pixels.
 *
 * # Safety
 * `episode` must be live and `boxes` must point to `4 * n_boxes` values.
 */
enum GlimpseStatus glimpse_episode_focus(struct GlimpseEpisode *episode,
                                         const int64_t *boxes,
                                         size_t n_boxes);

/**
 * Submit the final answer; `reward` receives 1 when it matches the gold label.
 *
 * # Safety
 * `episode` must be live, `answer` a NUL-terminated string and `reward`
 * valid for writes.
 */
enum GlimpseStatus glimpse_episode_answer(struct GlimpseEpisode *episode,
                                          const char *answer,
                                          uint8_t *reward);

/**
 * # Safety
 * `episode` must be live and `out` valid for writes.
 */
enum GlimpseStatus glimpse_episode_info(const struct GlimpseEpisode *episode,
                                        struct GlimpseEpisodeInfo *out);

/**
 * Borrow observation `index` as interleaved float samples. The pointer is
 * valid while the episode lives.
 *
 * # Safety
 * `episode` must be live; every out pointer must be valid for writes.
 */
enum GlimpseStatus glimpse_episode_observation(const struct GlimpseEpisode *episode,
                                               uint32_t index,
                                               uint32_t *width,
                                               uint32_t *height,
                                               uint32_t *channels,
                                               const float **data);

/**
 * The scripted oracle policy over scenes with `num_classes` classes
 * (0 keeps the default).
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum GlimpseStatus glimpse_policy_oracle(uint32_t num_classes, struct GlimpsePolicy **out);

/**
 * Load a linear policy checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum GlimpseStatus glimpse_policy_load(const char *path,
                                       uint32_t num_classes,
                                       struct GlimpsePolicy **out);

/**
 * # Safety
 * `policy` must come from a `glimpse_policy_*` constructor and not be used
 * afterwards.
 */
void glimpse_policy_free(struct GlimpsePolicy *policy);

/**
 * Greedy evaluation on the first `n_scenes` scenes of manifest `stream`
 * with the default evaluation settings. `budget` of 0 keeps the default
 * fixed budget.
 *
 * # Safety
 * `policy` must be live and `out` valid for writes.
 */
enum GlimpseStatus glimpse_evaluate(const struct GlimpsePolicy *policy,
                                    uint64_t stream,
                                    uint32_t n_scenes,
                                    bool constrained,
                                    uint32_t budget,
                                    struct GlimpseMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLIMPSE_H */

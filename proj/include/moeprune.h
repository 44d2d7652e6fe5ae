/*
 * Copyright (c) 2026 moeprune authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * moeprune -- calibration-free expert pruning for Mixture-of-Experts
 * checkpoints, plus calibration-based baselines and diagnostics.
 *
 * C API of the shared library. All functions return a status code; on
 * failure mp_last_error() gives a human-readable message for the calling
 * thread. Objects are opaque handles released with the matching _free().
 * Handles are not thread-safe unless stated; distinct handles may be used
 * from distinct threads freely.
 */

#ifndef MOEPRUNE_H
#define MOEPRUNE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mp_status {
    MP_OK = 0,
    MP_ERR_INVALID = 1, /* domain/validation error (bad ratio, layout mismatch, ...) */
    MP_ERR_IO = 2,      /* I/O failure or malformed file */
    MP_ERR_USAGE = 3    /* invalid arguments to the API itself */
} mp_status;

/* Message for the most recent failure on this thread; empty string if none. */
const char* mp_last_error(void);

const char* mp_version(void);

/* ------------------------------------------------------------------ */
/* layouts                                                            */

typedef struct mp_layout mp_layout;

/* `spec` is a preset name (olmoe-like, ernie-like, qwen3-like) or a path to
 * a layout JSON file. */
mp_status mp_layout_open(const char* spec, mp_layout** out);
void mp_layout_free(mp_layout* layout);

/* The layout a score table was computed under (embedded in its JSON);
 * declared below mp_scores. */
struct mp_scores;
mp_status mp_layout_from_scores(const struct mp_scores* scores, mp_layout** out);

/* ------------------------------------------------------------------ */
/* models                                                             */

typedef struct mp_model mp_model;

/* Opens a checkpoint directory (or single .safetensors file) and binds the
 * layout to it: counts come from config.json, dimensions from tensor shapes,
 * and every expert/router tensor name is checked to resolve. */
mp_status mp_model_open(const char* path, const mp_layout* layout, mp_model** out);
void mp_model_free(mp_model* model);

int64_t mp_model_num_layers(const mp_model* model);
int64_t mp_model_experts_per_layer(const mp_model* model);
int64_t mp_model_top_k(const mp_model* model);
int64_t mp_model_hidden_dim(const mp_model* model);
int64_t mp_model_expert_dim(const mp_model* model);

/* Generate a deterministic toy MoE checkpoint (+ config.json) under a layout
 * preset. dtype is "F32", "F16" or "BF16". shard_limit of 0 writes a single
 * shard. Same arguments always reproduce identical files. */
mp_status mp_gen_toy(const char* out_dir, const char* layout_spec, int64_t layers,
                     int64_t experts, int64_t top_k, int64_t hidden_dim, int64_t expert_dim,
                     uint64_t seed, const char* dtype, uint64_t shard_limit);

/* ------------------------------------------------------------------ */
/* scoring                                                            */

typedef struct mp_scores mp_scores;

/* Weight-only criteria: aimer, magnitude, hoyer, random. The seed feeds the
 * random baseline (pass 42 for the documented default). `threads` <= 0 picks
 * a default; results are identical for every thread count. */
mp_status mp_score(const mp_model* model, const char* criterion, uint64_t seed,
                   int threads, mp_scores** out);

/* Calibration criteria: frequency, seer, ean, reap. Runs `tokens` synthetic
 * seeded tokens through the model (toy scale only: refuses models whose
 * routed parameter count exceeds max_params). If stats_path is non-NULL the
 * raw routing statistics are written there as JSON. */
mp_status mp_calibrate(const mp_model* model, const char* criterion, uint64_t tokens,
                       uint64_t seed, uint64_t max_params, const char* stats_path,
                       int threads, mp_scores** out);

mp_status mp_scores_save(const mp_scores* scores, const char* path);
mp_status mp_scores_load(const char* path, mp_scores** out);
void mp_scores_free(mp_scores* scores);

int64_t mp_scores_num_layers(const mp_scores* scores);
int64_t mp_scores_experts_per_layer(const mp_scores* scores);
double mp_scores_get(const mp_scores* scores, int64_t layer, int64_t expert);
double mp_scores_timing_seconds(const mp_scores* scores);
const char* mp_scores_criterion(const mp_scores* scores);
/* Number of all-zero (degenerate) experts encountered while scoring. */
int64_t mp_scores_degenerate_count(const mp_scores* scores);

/* ------------------------------------------------------------------ */
/* pruning                                                            */

typedef struct mp_plan mp_plan;

/* Uniform per-layer plan: round-half-up(ratio * n) experts pruned from the
 * most-prunable end of each layer's ranking. Fails (MP_ERR_INVALID) when
 * fewer than top-k experts would remain, naming the maximum feasible ratio. */
mp_status mp_plan_make(const mp_scores* scores, double ratio, mp_plan** out);
mp_status mp_plan_save(const mp_plan* plan, const char* path);
mp_status mp_plan_load(const char* path, mp_plan** out);
void mp_plan_free(mp_plan* plan);

int64_t mp_plan_pruned_per_layer(const mp_plan* plan);
int64_t mp_plan_retained_per_layer(const mp_plan* plan);

/* Out-of-place surgery into out_dir: drops pruned expert tensors, renumbers
 * survivors, slices router rows (and bias entries), copies passthrough
 * tensors byte-identically and patches config.json. Refuses a plan whose
 * layout provenance does not match the model. */
mp_status mp_prune(const mp_model* model, const mp_plan* plan, const char* out_dir,
                   uint64_t shard_limit);

/* Structural audit of pruned_dir against original_dir under `plan`. Writes a
 * JSON report to report_path if non-NULL. Sets *all_pass to 1/0. */
mp_status mp_verify(const char* original_dir, const char* pruned_dir, const mp_plan* plan,
                    const char* report_path, int* all_pass);

/* ------------------------------------------------------------------ */
/* analysis artifacts (CSV + SVG, byte-deterministic)                 */

/* Rank profile and per-layer separation of a score table:
 * <prefix>_profile.{csv,svg} and <prefix>_separation.csv */
mp_status mp_export_profile(const mp_scores* scores, const char* prefix);

/* Raw score heatmap: <prefix>_scores.{csv,svg} */
mp_status mp_export_scores(const mp_scores* scores, const char* prefix);

/* Layer-wise hidden-state variance of the full model and, when ratio > 0, of
 * the pruned variant (scores may be NULL to score with aimer on the fly;
 * ratio 0 emits the full model twice as a self-check):
 * <prefix>_variance.{csv,svg} */
mp_status mp_export_variance(const mp_model* model, uint64_t tokens, uint64_t seed,
                             double ratio, const mp_scores* scores, uint64_t max_params,
                             int threads, const char* prefix);

/* Ranking stability across calibration sizes (comma-separated ascending
 * sizes): <prefix>_stability.{csv,svg} and <prefix>_overlap.csv */
mp_status mp_export_stability(const mp_model* model, const char* criterion,
                              const uint64_t* sizes, size_t num_sizes, uint64_t seed,
                              double ratio, uint64_t max_params, int threads,
                              const char* prefix);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* MOEPRUNE_H */

#ifndef SPECSTREAM_H
#define SPECSTREAM_H

/* Generated by cbindgen from the specstream-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SS_PRECISION_F32 0

#define SS_PRECISION_F64 1

// `eos` value meaning "no end-of-sequence token".
#define SS_NO_EOS -1

// Result of every fallible call.
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_SHAPE = 2,
  SS_STATUS_PARAMETER = 3,
  SS_STATUS_CAPACITY = 4,
  SS_STATUS_LOAD = 5,
  SS_STATUS_LOGIC = 6,
  SS_STATUS_CONFIG = 7,
  SS_STATUS_TRAINING = 8,
  SS_STATUS_IO = 9,
  SS_STATUS_BUFFER_TOO_SMALL = 10,
  SS_STATUS_PANIC = 11,
} SsStatus;

// Opaque model handle.
typedef struct SsModel SsModel;

typedef struct SsModelInfo {
  size_t vocab_size;
  size_t hidden_size;
  size_t num_layers;
  size_t msa_layers;
  size_t num_streams;
  size_t max_seq_len;
  size_t parameter_count;
} SsModelInfo;

// Greedy speculative decoding parameters.
typedef struct SsDecodeParams {
  size_t max_new;
  size_t gamma;
  size_t k;
  double tau;
  // Token id, or `SS_NO_EOS`.
  int64_t eos;
} SsDecodeParams;

typedef struct SsDecodeMetrics {
  uint64_t generated_tokens;
  uint64_t target_calls;
  double cr_ratio;
  uint64_t drafted_nodes;
  uint64_t pruned_nodes;
  uint64_t verified_nodes;
  uint64_t total_flops;
} SsDecodeMetrics;

// Latency model inputs; see `ss_perf_speedup`.
typedef struct SsPerfParams {
  double gamma;
  double c_draft;
  double c_target;
  double c_ss;
  double zeta;
  double beta;
} SsPerfParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread; empty after a
// successful call. Valid until the next call on the same thread.
const char *ss_last_error(void);

// Library version as a NUL-terminated string.
const char *ss_version(void);

// Loads a model from a weight manifest. `config_path` may be null to use
// the config the manifest names.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum SsStatus ss_model_load(const char *manifest_path,
                            const char *config_path,
                            uint32_t precision_code,
                            struct SsModel **out);

// Creates a randomly initialized model from a JSON config document.
//
// # Safety
// `config_json` must be null or NUL-terminated; `out` must be writable.
enum SsStatus ss_model_init(const char *config_json,
                            uint64_t seed,
                            uint32_t precision_code,
                            struct SsModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void ss_model_free(struct SsModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum SsStatus ss_model_info(const struct SsModel *model, struct SsModelInfo *out);

// γ = 4, k = 1, τ = 0, 32 new tokens, no eos.
struct SsDecodeParams ss_decode_params_default(void);

// Greedy speculative generation. Writes the new tokens (prompt excluded)
// to `out_tokens` and their count to `out_len`. `metrics` may be null.
// Returns `BUFFER_TOO_SMALL` with `out_len` set when `capacity` is short.
//
// # Safety
// `prompt` must hold `prompt_len` tokens, `out_tokens` `capacity` slots;
// `params` must be readable, `out_len` writable, `metrics` null or writable.
enum SsStatus ss_generate(const struct SsModel *model,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          const struct SsDecodeParams *params,
                          uint32_t *out_tokens,
                          size_t capacity,
                          size_t *out_len,
                          struct SsDecodeMetrics *metrics);

// Plain greedy decoding, one forward per token.
//
// # Safety
// As for `ss_generate`.
enum SsStatus ss_reference_generate(const struct SsModel *model,
                                    const uint32_t *prompt,
                                    size_t prompt_len,
                                    size_t max_new,
                                    int64_t eos,
                                    uint32_t *out_tokens,
                                    size_t capacity,
                                    size_t *out_len);

// Per-token latency of draft-target decoding over speculative streaming.
//
// # Safety
// `params` must be readable and `out` writable.
enum SsStatus ss_perf_speedup(const struct SsPerfParams *params, double *out);

// Draft-target tokens per cycle that break even; `zeta` is ignored.
//
// # Safety
// `params` must be readable and `out` writable.
enum SsStatus ss_perf_parity_zeta(const struct SsPerfParams *params, double *out);

// Nodes in a full draft tree: `1 + Σ_{g=1..γ} k^g` (saturating).
size_t ss_tree_size(size_t gamma, size_t k);

// Rows through the multi-stream layers for a full tree: `(1 + γ)·tree_size`.
size_t ss_msa_batch_size(size_t gamma, size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECSTREAM_H */

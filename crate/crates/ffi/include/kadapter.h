#ifndef KADAPTER_H
#define KADAPTER_H

/* Warning, this file is autogenerated by cbindgen. Don't modify this manually. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum KadStatus {
  KAD_STATUS_OK = 0,
  KAD_STATUS_NULL_POINTER = 1,
  KAD_STATUS_INVALID_ARGUMENT = 2,
  KAD_STATUS_INVALID_UTF8 = 3,
  KAD_STATUS_IO_ERROR = 4,
  KAD_STATUS_FORMAT_ERROR = 5,
  KAD_STATUS_RUNTIME_ERROR = 6,
} KadStatus;

/**
 * Opaque model handle: a backbone plus any loaded adapters.
 */
typedef struct KadModel KadModel;

#ifdef __cplusplus
extern "C" {
#endif  // __cplusplus

/**
 * Library version as a static string.
 */
const char *kad_version(void);

/**
 * Message of the last failure on this thread. Valid until the next failing
 * call on the same thread; never NULL.
 */
const char *kad_last_error(void);

/**
 * Create a freshly initialized desk-scale model (no adapters).
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
KadStatus kad_model_new_desk(uint64_t seed,
                             uintptr_t vocab_size,
                             KadModel **out);

/**
 * Load a backbone checkpoint produced by the `kadapter` CLI.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must point to
 * writable storage for one pointer.
 */
KadStatus kad_model_from_backbone_file(const char *path,
                                       KadModel **out);

/**
 * Attach a pre-trained adapter checkpoint; its features join the fusion in
 * load order.
 *
 * # Safety
 * `model` must be a live handle from a constructor; `path` a valid
 * NUL-terminated string.
 */
KadStatus kad_model_load_adapter(KadModel *model,
                                 const char *path);

/**
 * Width of the feature vector per token (backbone hidden alone, or the
 * fused width once adapters are loaded). Returns 0 on a null handle.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
uintptr_t kad_model_feature_dim(const KadModel *model);

/**
 * Number of adapters currently loaded. Returns 0 on a null handle.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
uintptr_t kad_model_adapter_count(const KadModel *model);

/**
 * Encode one token sequence and write the fused per-token features
 * (row-major `[len, feature_dim]`) into `out`. `*out_len` receives the
 * required element count; the write happens only when `out_capacity` is
 * large enough.
 *
 * # Safety
 * `token_ids` must point to `len` readable u32 values; `out` to
 * `out_capacity` writable doubles (may be NULL when querying the size);
 * `out_len` to one writable usize.
 */
KadStatus kad_model_features(const KadModel *model,
                             const uint32_t *token_ids,
                             uintptr_t len,
                             double *out,
                             uintptr_t out_capacity,
                             uintptr_t *out_len);

/**
 * Closed-form trainable-parameter count of one adapter model, from JSON
 * configurations (same schema as the CLI config sections).
 *
 * # Safety
 * `backbone_json` and `adapter_json` must be valid NUL-terminated strings;
 * `out` must point to one writable u64.
 */
KadStatus kad_param_count(const char *backbone_json,
                          const char *adapter_json,
                          uint64_t *out);

/**
 * Byte-level digest of a checkpoint file, for freezing audits from
 * bindings.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` one writable u64.
 */
KadStatus kad_checkpoint_digest(const char *path,
                                uint64_t *out);

/**
 * Release a model handle. NULL is a no-op.
 *
 * # Safety
 * `model` must be a handle from a constructor, not yet freed, or NULL.
 */
void kad_model_free(KadModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KADAPTER_H */

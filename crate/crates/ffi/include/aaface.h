#ifndef AAFACE_H
#define AAFACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum AafStatus {
  AAF_STATUS_OK = 0,
  /**
   * Invalid argument, configuration, shape or protocol.
   */
  AAF_STATUS_INVALID = 1,
  /**
   * Non-finite values or degenerate embeddings.
   */
  AAF_STATUS_NUMERICAL = 2,
  /**
   * File access or file format error.
   */
  AAF_STATUS_IO = 3,
  AAF_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  AAF_STATUS_PANIC = 5,
} AafStatus;

/**
 * Which embedding [`aaf_model_embed`] returns.
 */
typedef enum AafBranch {
  AAF_BRANCH_BASELINE = 0,
  AAF_BRANCH_FUSED = 1,
} AafBranch;

/**
 * Opaque standalone AAI module.
 */
typedef struct AafAai AafAai;

/**
 * Opaque model handle.
 */
typedef struct AafModel AafModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *aaf_version(void);

/**
 * Message of the last error on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *aaf_last_error(void);

/**
 * Builds a model from config text (NULL for defaults) for `n_identities`
 * training identities, initialised from `seed`.
 *
 * # Safety
 * `config` must be NULL or a NUL-terminated string; `out` must be writable.
 */
enum AafStatus aaf_model_new(const char *config,
                             uintptr_t n_identities,
                             uint64_t seed,
                             struct AafModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`aaf_model_new`] not yet freed.
 */
void aaf_model_free(struct AafModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum AafStatus aaf_model_load_weights(struct AafModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum AafStatus aaf_model_save_weights(const struct AafModel *model, const char *path);

/**
 * Embedding width, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uintptr_t aaf_model_embedding_dim(const struct AafModel *model);

/**
 * Number of attribute heads, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uintptr_t aaf_model_num_attributes(const struct AafModel *model);

/**
 * Embeds `n` images of shape `(c, h, w)` into `out` (`n * embedding_dim`
 * floats, row-major).
 *
 * # Safety
 * `images` must hold `n * c * h * w` floats and `out` `out_len` floats.
 */
enum AafStatus aaf_model_embed(const struct AafModel *model,
                               const float *images,
                               uintptr_t n,
                               uintptr_t c,
                               uintptr_t h,
                               uintptr_t w,
                               enum AafBranch branch,
                               float *out,
                               uintptr_t out_len);

/**
 * Attribute probabilities of `n` images into `out` (`n * num_attributes`).
 *
 * # Safety
 * `images` must hold `n * c * h * w` floats and `out` `out_len` floats.
 */
enum AafStatus aaf_model_attribute_probs(const struct AafModel *model,
                                         const float *images,
                                         uintptr_t n,
                                         uintptr_t c,
                                         uintptr_t h,
                                         uintptr_t w,
                                         float *out,
                                         uintptr_t out_len);

/**
 * # Safety
 * `out` must be writable.
 */
enum AafStatus aaf_aai_new(uintptr_t channels,
                           uintptr_t reduction,
                           uint64_t seed,
                           struct AafAai **out);

/**
 * # Safety
 * `aai` must be NULL or a handle from [`aaf_aai_new`] not yet freed.
 */
void aaf_aai_free(struct AafAai *aai);

/**
 * Fuses two `(n, c, h, w)` maps. `fused` and `m_c` receive `n*c*h*w`
 * floats, `m_s` receives `n*h*w`. `m_c` and `m_s` may be NULL.
 *
 * # Safety
 * All non-NULL buffers must have the sizes above.
 */
enum AafStatus aaf_aai_fuse(const struct AafAai *aai,
                            const float *f_fr,
                            const float *f_sb,
                            uintptr_t n,
                            uintptr_t c,
                            uintptr_t h,
                            uintptr_t w,
                            float *fused,
                            float *m_c,
                            float *m_s);

/**
 * Cosine similarity of two `len`-vectors.
 *
 * # Safety
 * `a` and `b` must hold `len` floats; `out` must be writable.
 */
enum AafStatus aaf_cosine_similarity(const float *a, const float *b, uintptr_t len, double *out);

/**
 * Threshold and TAR at each FAR target. `below_resolution` (may be NULL)
 * receives 1 where the target is finer than `1 / n_impostor`.
 *
 * # Safety
 * Input buffers must hold the stated counts; each output `n_targets` values.
 */
enum AafStatus aaf_tar_at_far(const double *genuine,
                              uintptr_t n_genuine,
                              const double *impostor,
                              uintptr_t n_impostor,
                              const double *far_targets,
                              uintptr_t n_targets,
                              double *thresholds,
                              double *tars,
                              uint8_t *below_resolution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AAFACE_H */

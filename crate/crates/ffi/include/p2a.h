#ifndef P2A_H
#define P2A_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Embedding width of the built-in encoder.
 */
#define P2A_EMBED_DIM 32

/**
 * Channel count of layer-1 feature maps from the built-in encoder.
 */
#define P2A_LAYER1_CHANNELS 8

typedef enum P2aStatus {
  P2A_STATUS_OK = 0,
  P2A_STATUS_NULL_POINTER = 1,
  P2A_STATUS_INVALID_UTF8 = 2,
  P2A_STATUS_CONFIG = 3,
  P2A_STATUS_SHAPE = 4,
  P2A_STATUS_DEGENERATE = 5,
  P2A_STATUS_NON_FINITE = 6,
  P2A_STATUS_DATA = 7,
  P2A_STATUS_IO = 8,
  P2A_STATUS_BUFFER_TOO_SMALL = 9,
  P2A_STATUS_PANIC = 10,
} P2aStatus;

typedef struct P2aEmbedding P2aEmbedding;

typedef struct P2aEncoder P2aEncoder;

typedef struct P2aFeatureMap P2aFeatureMap;

typedef struct P2aStyleSet P2aStyleSet;

/**
 * Steering options. `steps = 0` returns the input statistics.
 */
typedef struct P2aSteerConfig {
  size_t steps;
  double lr;
  double momentum;
} P2aSteerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *p2a_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated, possibly
 * truncated) into `buf` and returns the buffer size the full message needs.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t p2a_last_error(char *buf, size_t len);

/**
 * Deterministic encoder weights for `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum P2aStatus p2a_encoder_new(uint64_t seed, struct P2aEncoder **out);

/**
 * Loads encoder weights from a P2AW file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum P2aStatus p2a_encoder_load(const char *path, struct P2aEncoder **out);

/**
 * # Safety
 * `enc` must be a live encoder handle and `path` a NUL-terminated string.
 */
enum P2aStatus p2a_encoder_save(const struct P2aEncoder *enc, const char *path);

/**
 * # Safety
 * `enc` must be null or a handle from this library, not yet freed.
 */
void p2a_encoder_free(struct P2aEncoder *enc);

/**
 * Copies a `c x h x w` row-major array into a new feature map.
 *
 * # Safety
 * `data` must point to `c*h*w` readable doubles; `out` is a handle slot.
 */
enum P2aStatus p2a_feature_map_new(const double *data,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   struct P2aFeatureMap **out);

/**
 * Layer-1 feature map of a `3 x h x w` image.
 *
 * # Safety
 * `enc` is a live encoder, `data` points to `3*h*w` doubles, `out` is a
 * handle slot.
 */
enum P2aStatus p2a_feature_map_from_image(const struct P2aEncoder *enc,
                                          const double *data,
                                          size_t h,
                                          size_t w,
                                          struct P2aFeatureMap **out);

/**
 * # Safety
 * `map` is a live handle; the out pointers are valid or null.
 */
enum P2aStatus p2a_feature_map_shape(const struct P2aFeatureMap *map,
                                     size_t *c,
                                     size_t *h,
                                     size_t *w);

/**
 * Copies the map's values (row-major) into `buf`.
 *
 * # Safety
 * `map` is a live handle and `buf` has room for `len` doubles.
 */
enum P2aStatus p2a_feature_map_read(const struct P2aFeatureMap *map, double *buf, size_t len);

/**
 * # Safety
 * `map` must be null or a handle from this library, not yet freed.
 */
void p2a_feature_map_free(struct P2aFeatureMap *map);

/**
 * Per-channel mean and population standard deviation.
 *
 * # Safety
 * `map` is a live handle; `mu` and `sigma` have room for `c` doubles.
 */
enum P2aStatus p2a_channel_stats(const struct P2aFeatureMap *map,
                                 double *mu,
                                 double *sigma,
                                 size_t c);

/**
 * Re-normalises `map` toward the target statistics `(mu, sigma)`.
 *
 * # Safety
 * `map` is a live handle; `mu` and `sigma` point to `c` doubles; `out` is a
 * handle slot.
 */
enum P2aStatus p2a_pin(const struct P2aFeatureMap *map,
                       const double *mu,
                       const double *sigma,
                       size_t c,
                       struct P2aFeatureMap **out);

/**
 * Embedding of a text prompt.
 *
 * # Safety
 * `enc` is a live encoder, `prompt` a NUL-terminated string, `out` a
 * handle slot.
 */
enum P2aStatus p2a_encode_text(const struct P2aEncoder *enc,
                               const char *prompt,
                               struct P2aEmbedding **out);

/**
 * Embedding of a layer-1 feature map.
 *
 * # Safety
 * `enc` and `map` are live handles, `out` a handle slot.
 */
enum P2aStatus p2a_embed_feature_map(const struct P2aEncoder *enc,
                                     const struct P2aFeatureMap *map,
                                     struct P2aEmbedding **out);

/**
 * Copies the unit-norm embedding into `buf`.
 *
 * # Safety
 * `emb` is a live handle and `buf` has room for `len` doubles.
 */
enum P2aStatus p2a_embedding_read(const struct P2aEmbedding *emb, double *buf, size_t len);

/**
 * # Safety
 * `emb` must be null or a handle from this library, not yet freed.
 */
void p2a_embedding_free(struct P2aEmbedding *emb);

/**
 * `1 - cos(a, b)`, in `[0, 2]`.
 *
 * # Safety
 * `a` and `b` are live handles and `out` is valid.
 */
enum P2aStatus p2a_cosine_loss(const struct P2aEmbedding *a,
                               const struct P2aEmbedding *b,
                               double *out);

/**
 * Optimises one style per feature map toward `trg`.
 *
 * # Safety
 * `maps` points to `n` live feature-map handles; `enc`, `trg` and `cfg` are
 * valid; `out` is a handle slot.
 */
enum P2aStatus p2a_steer(const struct P2aEncoder *enc,
                         const struct P2aFeatureMap *const *maps,
                         size_t n,
                         const struct P2aEmbedding *trg,
                         const struct P2aSteerConfig *cfg,
                         struct P2aStyleSet **out);

/**
 * Number of entries; 0 for a null handle.
 *
 * # Safety
 * `set` must be null or a live handle.
 */
size_t p2a_style_set_len(const struct P2aStyleSet *set);

/**
 * Copies entry `i`: statistics into `mu`/`sigma` (room for `c` each) and the
 * initial and final steering loss into the optional loss pointers.
 *
 * # Safety
 * `set` is a live handle; buffers are valid for `c` doubles; loss pointers
 * are valid or null.
 */
enum P2aStatus p2a_style_set_entry(const struct P2aStyleSet *set,
                                   size_t i,
                                   double *mu,
                                   double *sigma,
                                   size_t c,
                                   double *loss_init,
                                   double *loss_final);

/**
 * # Safety
 * `set` must be null or a handle from this library, not yet freed.
 */
void p2a_style_set_free(struct P2aStyleSet *set);

/**
 * mAP at IoU `iou` of a predictions JSONL file against a dataset JSONL file.
 *
 * # Safety
 * Paths are NUL-terminated strings and `out` is valid.
 */
enum P2aStatus p2a_eval_map(const char *dataset, const char *preds, double iou, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* P2A_H */

#ifndef CHYVAE_H
#define CHYVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

enum ChyvaeModelKind
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CHYVAE_MODEL_KIND_CHYVAE = 0,
  CHYVAE_MODEL_KIND_BETA_VAE = 1,
};
#ifndef __cplusplus
typedef int32_t ChyvaeModelKind;
#endif // __cplusplus

enum ChyvaeStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CHYVAE_STATUS_OK = 0,
  CHYVAE_STATUS_NULL_POINTER = 1,
  CHYVAE_STATUS_INVALID_ARGUMENT = 2,
  CHYVAE_STATUS_BUFFER_TOO_SMALL = 3,
  CHYVAE_STATUS_NOT_POSITIVE_DEFINITE = 4,
  CHYVAE_STATUS_DIMENSION_MISMATCH = 5,
  CHYVAE_STATUS_NON_FINITE_GRADIENT = 6,
  CHYVAE_STATUS_CONFIG = 7,
  CHYVAE_STATUS_FORMAT = 8,
  CHYVAE_STATUS_IO = 9,
  CHYVAE_STATUS_PANIC = 10,
};
#ifndef __cplusplus
typedef int32_t ChyvaeStatus;
#endif // __cplusplus

/*
 Opaque image dataset.
 */
typedef struct ChyvaeDataset ChyvaeDataset;

/*
 Opaque trained model (parameters plus the training configuration echo).
 */
typedef struct ChyvaeModel ChyvaeModel;

/*
 Training settings. Obtain defaults from [`chyvae_train_config_default`].
 */
typedef struct ChyvaeTrainConfig {
  ChyvaeModelKind model;
  double nu;
  double beta;
  size_t latent_dim;
  /*
   Hidden widths; null keeps the default `{512, 256}`.
   */
  const size_t *hidden;
  size_t hidden_len;
  size_t batch_size;
  uint64_t steps;
  uint64_t seed;
  double learning_rate;
} ChyvaeTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failing call on this thread, or null if none.
 The pointer stays valid until the next failing call on this thread.
 */
const char *chyvae_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *chyvae_version(void);

/*
 Renders `n` CorrelatedEllipses images of `height × width`.

 # Safety
 `out` must be a valid pointer to writable handle storage.
 */
ChyvaeStatus chyvae_dataset_generate(size_t n,
                                     size_t height,
                                     size_t width,
                                     double rho_pos,
                                     double rho_so,
                                     uint64_t seed,
                                     struct ChyvaeDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid handle storage.
 */
ChyvaeStatus chyvae_dataset_load(const char *path, struct ChyvaeDataset **out);

/*
 # Safety
 `ds` must be a live dataset handle and `path` a NUL-terminated string.
 */
ChyvaeStatus chyvae_dataset_save(const struct ChyvaeDataset *ds, const char *path);

/*
 Number of images, or 0 for a null handle.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t chyvae_dataset_len(const struct ChyvaeDataset *ds);

/*
 Writes image height and width.

 # Safety
 `ds` must be a live dataset handle; `height` and `width` writable.
 */
ChyvaeStatus chyvae_dataset_shape(const struct ChyvaeDataset *ds, size_t *height, size_t *width);

/*
 Copies image `index` into `out` as values in [0, 1] (row-major).

 # Safety
 `ds` must be a live dataset handle and `out` must hold `out_len` doubles.
 */
ChyvaeStatus chyvae_dataset_image(const struct ChyvaeDataset *ds,
                                  size_t index,
                                  double *out,
                                  size_t out_len);

/*
 Copies the four factor indices (x, y, scale, orientation) of image `index`.

 # Safety
 `ds` must be a live dataset handle and `out` must hold 4 values.
 */
ChyvaeStatus chyvae_dataset_factors(const struct ChyvaeDataset *ds, size_t index, uint16_t *out);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void chyvae_dataset_free(struct ChyvaeDataset *ds);

/*
 Desk-scale defaults: hyperprior model, `ν = 500`, `p = 10`, batch 50,
 5000 steps, learning rate `1e-4`.
 */
struct ChyvaeTrainConfig chyvae_train_config_default(void);

/*
 Trains on `ds`. When `log_out` is non-null it receives the per-step
 per-pixel reconstruction error; it must hold `log_len ≥ steps` doubles.

 # Safety
 All pointers must be valid for their stated use.
 */
ChyvaeStatus chyvae_train(const struct ChyvaeDataset *ds,
                          const struct ChyvaeTrainConfig *config,
                          double *log_out,
                          size_t log_len,
                          struct ChyvaeModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid handle storage.
 */
ChyvaeStatus chyvae_model_load(const char *path, struct ChyvaeModel **out);

/*
 # Safety
 `model` must be a live model handle and `path` a NUL-terminated string.
 */
ChyvaeStatus chyvae_model_save(const struct ChyvaeModel *model, const char *path);

/*
 Latent size `p`, or 0 for a null handle.

 # Safety
 `model` must be null or a live model handle.
 */
size_t chyvae_model_latent_dim(const struct ChyvaeModel *model);

/*
 Pixels per image `D`, or 0 for a null handle.

 # Safety
 `model` must be null or a live model handle.
 */
size_t chyvae_model_input_dim(const struct ChyvaeModel *model);

/*
 Posterior means of `n` images (`n × D` in, `n × p` out).

 # Safety
 `images` must hold `n·D` doubles and `out` `out_len` doubles.
 */
ChyvaeStatus chyvae_model_encode(const struct ChyvaeModel *model,
                                 const double *images,
                                 size_t n,
                                 double *out,
                                 size_t out_len);

/*
 Decoder means in (0, 1) for `n` latents (`n × p` in, `n × D` out).

 # Safety
 `latents` must hold `n·p` doubles and `out` `out_len` doubles.
 */
ChyvaeStatus chyvae_model_decode(const struct ChyvaeModel *model,
                                 const double *latents,
                                 size_t n,
                                 double *out,
                                 size_t out_len);

/*
 Majority-vote disentanglement score on freshly generated square images
 (`ρ = 0.7` for both factor pairs).

 # Safety
 `model` must be a live model handle and `score` writable.
 */
ChyvaeStatus chyvae_model_metric_score(const struct ChyvaeModel *model,
                                       size_t l,
                                       size_t m,
                                       size_t b,
                                       size_t n,
                                       uint64_t seed,
                                       double *score);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void chyvae_model_free(struct ChyvaeModel *model);

/*
 `KL(W⁻¹(Φ, λ) ‖ W⁻¹(Ψ, ν))` for row-major `p × p` scale matrices.

 # Safety
 `phi` and `psi` must hold `p·p` doubles and `out` be writable.
 */
ChyvaeStatus chyvae_iw_kl(size_t p,
                          const double *phi,
                          double lambda,
                          const double *psi,
                          double nu,
                          double *out);

/*
 One Bartlett draw from `W⁻¹(Ψ, ν)` into `out` (row-major `p × p`).

 # Safety
 `psi` must hold `p·p` doubles and `out` `out_len` doubles.
 */
ChyvaeStatus chyvae_iw_sample(size_t p,
                              const double *psi,
                              double nu,
                              uint64_t seed,
                              double *out,
                              size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHYVAE_H */

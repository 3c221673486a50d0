/* C interface to the bcpnn library. Regenerated by the crate build script. */

#ifndef BCPNN_H
#define BCPNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Arithmetic mode of a network or training run.
 */
typedef enum BcpnnMode {
  BCPNN_MODE_F64 = 0,
  BCPNN_MODE_F32 = 1,
  BCPNN_MODE_BF14 = 2,
  BCPNN_MODE_BF15 = 3,
  BCPNN_MODE_BF16 = 4,
  BCPNN_MODE_BF20 = 5,
  BCPNN_MODE_BF24 = 6,
  BCPNN_MODE_BF28 = 7,
} BcpnnMode;

/**
 * Result class of an API call.
 */
typedef enum BcpnnStatus {
  BCPNN_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or an out-of-domain scalar argument.
   */
  BCPNN_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Rejected configuration (geometry, hyperparameters).
   */
  BCPNN_STATUS_CONFIG = 2,
  /**
   * Dataset problems: unreadable, malformed, missing labels.
   */
  BCPNN_STATUS_DATA = 3,
  /**
   * Training/inference failure, file IO, internal errors.
   */
  BCPNN_STATUS_RUNTIME = 4,
} BcpnnStatus;

/**
 * Opaque sample container.
 */
typedef struct BcpnnDataset BcpnnDataset;

/**
 * Opaque trained (or in-training) network of any arithmetic mode.
 */
typedef struct BcpnnNetwork BcpnnNetwork;

/**
 * Training hyperparameters and model geometry. Obtain defaults with
 * `bcpnn_config_default`, then override fields as needed.
 */
typedef struct BcpnnConfig {
  enum BcpnnMode mode;
  double lambda_hidden;
  double lambda_output;
  double k_b;
  /**
   * Stddev of the seeded support noise in the unsupervised phase.
   */
  double support_noise;
  uintptr_t n_epochs1;
  uintptr_t n_epochs2;
  uintptr_t n_cycles;
  uintptr_t batch_size;
  uintptr_t fan_in;
  uintptr_t swaps_per_hcu;
  /**
   * 0 = default cadence (one rewire per hidden-HCU-count batches).
   */
  uintptr_t mask_update_period;
  uintptr_t n_workers;
  uint64_t seed;
  uintptr_t hidden_hcus;
  uintptr_t hidden_mcus;
} BcpnnConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failing call on this thread. Never null;
 * empty before the first failure. The pointer is invalidated by the next
 * failing call on the same thread.
 */
const char *bcpnn_last_error(void);

/**
 * Fills `out` with the library defaults (f32 arithmetic, 30×100 hidden
 * geometry). Null `out` is a no-op.
 */
void bcpnn_config_default(struct BcpnnConfig *out);

/**
 * Loads an IDX image/label pair (gzip accepted) into a new dataset handle.
 *
 * # Safety
 * `images` and `labels` must be valid NUL-terminated strings; `out` must be
 * a valid pointer.
 */
enum BcpnnStatus bcpnn_dataset_load_idx(const char *images,
                                        const char *labels,
                                        struct BcpnnDataset **out);

/**
 * Draws a labeled synthetic cluster dataset.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BcpnnStatus bcpnn_dataset_synthetic(uint64_t seed,
                                         uintptr_t clusters,
                                         uintptr_t samples,
                                         uintptr_t features,
                                         double spread,
                                         struct BcpnnDataset **out);

/**
 * Produces a complement-coded copy: each feature x becomes the pair
 * (x, 1−x). Fails on an already-encoded dataset.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must be a valid pointer.
 */
enum BcpnnStatus bcpnn_dataset_encode_complement(const struct BcpnnDataset *ds,
                                                 struct BcpnnDataset **out);

/**
 * Sample count; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t bcpnn_dataset_n_samples(const struct BcpnnDataset *ds);

/**
 * Feature count per sample (after any encoding); 0 for null.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t bcpnn_dataset_n_features(const struct BcpnnDataset *ds);

/**
 * Frees a dataset handle; null is a no-op.
 *
 * # Safety
 * `ds` must be null or a handle not freed before.
 */
void bcpnn_dataset_free(struct BcpnnDataset *ds);

/**
 * Runs both training phases on `ds` per `cfg` and returns a new network
 * handle.
 *
 * # Safety
 * `cfg` and `ds` must be live handles; `out` must be a valid pointer.
 */
enum BcpnnStatus bcpnn_train(const struct BcpnnConfig *cfg,
                             const struct BcpnnDataset *ds,
                             struct BcpnnNetwork **out);

/**
 * Test accuracy of `net` on a labeled dataset, written to `accuracy`.
 *
 * # Safety
 * `net` and `ds` must be live handles; `accuracy` must be a valid pointer.
 */
enum BcpnnStatus bcpnn_evaluate(const struct BcpnnNetwork *net,
                                const struct BcpnnDataset *ds,
                                double *accuracy);

/**
 * Classifies one sample of `n_features` values (matching the network's
 * input width); the winning class index is written to `class_out`.
 *
 * # Safety
 * `net` must be a live handle; `features` must point to `n_features`
 * readable floats; `class_out` must be a valid pointer.
 */
enum BcpnnStatus bcpnn_predict(const struct BcpnnNetwork *net,
                               const float *features,
                               uintptr_t n_features,
                               uint32_t *class_out);

/**
 * Arithmetic mode stored in the network.
 *
 * # Safety
 * `net` must be a live handle.
 */
enum BcpnnMode bcpnn_network_mode(const struct BcpnnNetwork *net);

/**
 * Serializes the network to the versioned binary model format.
 *
 * # Safety
 * `net` must be a live handle; `path` a valid NUL-terminated string.
 */
enum BcpnnStatus bcpnn_network_save(const struct BcpnnNetwork *net, const char *path);

/**
 * Loads a model file into a new network handle; the arithmetic mode comes
 * from the file header.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum BcpnnStatus bcpnn_network_load(const char *path, struct BcpnnNetwork **out);

/**
 * Frees a network handle; null is a no-op.
 *
 * # Safety
 * `net` must be null or a handle not freed before.
 */
void bcpnn_network_free(struct BcpnnNetwork *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCPNN_H */

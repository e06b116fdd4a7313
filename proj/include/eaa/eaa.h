#ifndef EAA_EAA_H
#define EAA_EAA_H

/* C interface to libeaanet: synthetic volume generation and serialization,
 * model lifecycle, training, evaluation, prediction, and the gradient-check
 * suite. Every entry point returns a status code; eaa_last_error() carries
 * the detail message of the most recent failure on the calling thread.
 * Objects returned through out-parameters are owned by the caller and are
 * released with the matching *_free function. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum eaa_status {
  EAA_OK = 0,
  EAA_ERR_INVALID_ARGUMENT, /* null pointer or malformed scalar argument */
  EAA_ERR_SHAPE,            /* tensor or volume extents do not line up */
  EAA_ERR_CONFIG,           /* rejected model or training configuration */
  EAA_ERR_VALUE,            /* argument outside its documented domain */
  EAA_ERR_IO,               /* file unreadable, unwritable, or trailing bytes */
  EAA_ERR_BAD_MAGIC,        /* file does not start with the expected magic */
  EAA_ERR_TRUNCATED,        /* file ends mid-record */
  EAA_ERR_CHECKSUM,         /* file content does not match its checksum */
  EAA_ERR_NUMERIC,          /* a loss term stopped being finite */
  EAA_ERR_GRADCHECK,        /* gradient check suite found a failure */
  EAA_ERR_INTERNAL          /* out of memory or an unclassified fault */
} eaa_status;

/* Stable identifier string, e.g. "EAA_ERR_SHAPE". */
const char* eaa_status_name(eaa_status status);

/* Detail message of the most recent failing call on this thread, "" after a
 * success. Valid until the next library call on the same thread. */
const char* eaa_last_error(void);

/* Frees strings the library handed out (eaa_gradcheck report). */
void eaa_string_free(char* s);

/* ---- volumes ---------------------------------------------------------- */

typedef struct eaa_volume eaa_volume;

/* Synthetic labelled volume: a noisy ellipse drifting through the stack.
 * Requires slices >= 3 and height, width >= 16. */
eaa_status eaa_volume_generate(uint64_t seed, uint32_t slices, uint32_t height,
                               uint32_t width, eaa_volume** out);

/* Wraps caller data: image in [0,1], labels 0 or 1, both of length
 * slices*height*width in slice-major row-major order. The data is copied. */
eaa_status eaa_volume_from_data(uint32_t slices, uint32_t height, uint32_t width,
                                const float* image, const uint8_t* labels,
                                eaa_volume** out);

eaa_status eaa_volume_load(const char* path, eaa_volume** out);
eaa_status eaa_volume_save(const eaa_volume* vol, const char* path);

/* Any out-pointer may be NULL. */
eaa_status eaa_volume_dims(const eaa_volume* vol, uint32_t* slices, uint32_t* height,
                           uint32_t* width);

void eaa_volume_free(eaa_volume* vol);

/* ---- models ----------------------------------------------------------- */

typedef struct eaa_model eaa_model;

typedef struct eaa_model_config {
  uint32_t depth;         /* encoder levels, each halving the plane */
  uint32_t base_channels; /* channels after the first encoder block */
  double recon_fraction;  /* reconstruction branch width as a fraction, (0,1] */
  uint32_t num_classes;   /* segmentation classes including background, >= 2 */
  uint32_t se_reduction;  /* channel reduction inside attention blocks */
  uint32_t height, width; /* input plane, each a positive multiple of 2^depth */
} eaa_model_config;

void eaa_model_config_defaults(eaa_model_config* cfg);

eaa_status eaa_model_create(const eaa_model_config* cfg, uint64_t seed, eaa_model** out);

/* Checkpoint files; saving a model alone drops any optimizer state. */
eaa_status eaa_model_load(const char* path, eaa_model** out);
eaa_status eaa_model_save(const eaa_model* model, const char* path);

eaa_status eaa_model_config_of(const eaa_model* model, eaa_model_config* out);
eaa_status eaa_model_parameter_count(const eaa_model* model, uint64_t* out);

/* The fusion gate between the plain and fused decoders; on by default.
 * Turning it off makes the fused head bypass the learned attention, which
 * isolates its contribution in ablation runs. Not stored in checkpoints. */
eaa_status eaa_model_set_fusion_enabled(eaa_model* model, int enabled);
eaa_status eaa_model_fusion_enabled(const eaa_model* model, int* out);

void eaa_model_free(eaa_model* model);

/* ---- training --------------------------------------------------------- */

typedef struct eaa_epoch_log {
  uint64_t epoch;      /* counted from 0 */
  double lr;           /* rate used for this epoch */
  double recon_l1;     /* reconstruction mean absolute error */
  double recon_l2;     /* reconstruction mean squared error */
  double seg_basic;    /* weighted CE + dice of the plain head */
  double seg_complete; /* weighted CE + dice of the fused head */
  double total;        /* sum of the four terms */
  double train_dsc;    /* fused-head DSC pooled over the epoch's batches */
} eaa_epoch_log;

typedef void (*eaa_epoch_callback)(const eaa_epoch_log* log, void* user);

typedef struct eaa_train_config {
  uint64_t epochs;
  double lr0;               /* decays polynomially to 0 across the run */
  uint64_t batch_size;
  uint64_t seed;            /* shuffle order; epoch e reshuffles with seed+e */
  uint64_t checkpoint_every; /* 0: only the final checkpoint */
  const char* out_dir;      /* NULL: write no checkpoint files */
  const char* log_csv_path; /* NULL: write no training log */
} eaa_train_config;

void eaa_train_config_defaults(eaa_train_config* cfg);

/* Trains in place on neighbour triplets cut from the volumes. The model must
 * have two classes and plane extents matching every volume. */
eaa_status eaa_train(eaa_model* model, const eaa_volume* const* volumes,
                     size_t volume_count, const eaa_train_config* cfg,
                     eaa_epoch_callback on_epoch, void* user);

/* ---- evaluation and prediction ---------------------------------------- */

typedef enum eaa_head { EAA_HEAD_COMPLETE = 0, EAA_HEAD_BASIC = 1 } eaa_head;

typedef struct eaa_metrics {
  double dsc;
  double hd;   /* NaN when has_hd is 0 */
  double hd95; /* NaN when has_hd is 0 */
  double sensitivity;
  double specificity;
  double volume_similarity;
  int has_hd; /* 0 when either mask of the pair was empty */
} eaa_metrics;

/* Evaluates interior-slice predictions volume by volume. per_volume (length
 * volume_count), aggregate, and csv_path are each optional; the CSV holds
 * one row per volume. */
eaa_status eaa_evaluate(eaa_model* model, const eaa_volume* const* volumes,
                        size_t volume_count, eaa_head head, eaa_metrics* per_volume,
                        eaa_metrics* aggregate, const char* csv_path);

/* Predicted 0/1 mask for the volume's interior slices, written to mask_out
 * in slice-major order: (slices-2)*height*width bytes. */
eaa_status eaa_predict(eaa_model* model, const eaa_volume* volume, eaa_head head,
                       uint8_t* mask_out);

/* ---- gradient checks --------------------------------------------------- */

/* Runs the finite-difference suite. EAA_OK when every check passed,
 * EAA_ERR_GRADCHECK otherwise. When report_out is non-NULL it receives the
 * full text report (free with eaa_string_free) in both cases. */
eaa_status eaa_gradcheck(uint64_t seed, char** report_out);

#ifdef __cplusplus
}
#endif

#endif /* EAA_EAA_H */

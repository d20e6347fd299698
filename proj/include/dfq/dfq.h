/* C interface to the dfq library: toy segmentation model, calibration image
 * synthesis, post-training quantization and evaluation.
 *
 * Conventions
 *   - Every object is an opaque handle created by a dfq_*_create/load/...
 *     call and released with the matching dfq_*_free (NULL is accepted).
 *   - Functions that can fail return dfq_status. On failure the message is
 *     available from dfq_last_error() until the next failing call on the
 *     same thread; output handles are set to NULL.
 *   - Handles may be used from any thread but not from two threads at once.
 */
#ifndef DFQ_DFQ_H
#define DFQ_DFQ_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(DFQ_BUILDING_LIBRARY)
#    define DFQ_API __declspec(dllexport)
#  else
#    define DFQ_API __declspec(dllimport)
#  endif
#else
#  define DFQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dfq_status {
  DFQ_OK = 0,
  DFQ_ERR_INVALID_ARGUMENT = 1,
  DFQ_ERR_SHAPE = 2,
  DFQ_ERR_FORMAT = 3,
  DFQ_ERR_IO = 4,
  DFQ_ERR_NUMERIC = 5,
  DFQ_ERR_INTERNAL = 6
} dfq_status;

DFQ_API const char* dfq_last_error(void);
DFQ_API const char* dfq_status_name(dfq_status status);
DFQ_API const char* dfq_version(void);

/* Non-fatal diagnostics collected on the calling thread. Each call hands the
 * pending messages to cb in order and clears them; returns their count. cb
 * may be NULL to discard. */
DFQ_API size_t dfq_drain_warnings(void (*cb)(const char* message, void* user), void* user);

typedef struct dfq_model dfq_model;
typedef struct dfq_quantized dfq_quantized;
typedef struct dfq_dataset dfq_dataset;
typedef struct dfq_image dfq_image;
typedef struct dfq_synthesis dfq_synthesis;
typedef struct dfq_report dfq_report;
typedef struct dfq_table dfq_table;

/* ---- model ------------------------------------------------------------- */

typedef struct dfq_model_config {
  uint32_t image_size;
  uint32_t patch_size;
  uint32_t embed_dim;
  uint32_t num_layers;
  uint32_t num_heads;
  uint32_t mlp_ratio;
  uint32_t num_classes; /* class 0 is background */
  uint32_t channels;
} dfq_model_config;

DFQ_API void dfq_model_config_default(dfq_model_config* config);
DFQ_API dfq_status dfq_model_config_validate(const dfq_model_config* config);

DFQ_API dfq_status dfq_model_create(const dfq_model_config* config, uint64_t seed, dfq_model** out);
DFQ_API dfq_status dfq_model_load(const char* path, dfq_model** out);
DFQ_API dfq_status dfq_model_save(const dfq_model* model, const char* path);
DFQ_API void dfq_model_get_config(const dfq_model* model, dfq_model_config* config);
DFQ_API size_t dfq_model_parameter_count(const dfq_model* model);
DFQ_API void dfq_model_free(dfq_model* model);

/* ---- dataset ----------------------------------------------------------- */

DFQ_API dfq_status dfq_dataset_generate(uint64_t seed, size_t count, const dfq_model_config* config,
                                        dfq_dataset** out);
DFQ_API size_t dfq_dataset_size(const dfq_dataset* data);
/* Copy of image i. */
DFQ_API dfq_status dfq_dataset_image(const dfq_dataset* data, size_t i, dfq_image** out);
DFQ_API void dfq_dataset_free(dfq_dataset* data);

/* ---- training ---------------------------------------------------------- */

typedef struct dfq_train_options {
  int epochs;
  double lr;
  size_t batch_size;
  uint64_t seed;
} dfq_train_options;

DFQ_API void dfq_train_options_default(dfq_train_options* options);
/* Trains a copy of model. final_loss (may be NULL) receives the last epoch's
 * mean per-pixel cross entropy, or NaN for zero epochs. */
DFQ_API dfq_status dfq_train(const dfq_model* model, const dfq_dataset* data,
                             const dfq_train_options* options, dfq_model** out, double* final_loss);

/* ---- images ------------------------------------------------------------ */

/* data holds h*w*channels doubles, row-major with channels innermost. */
DFQ_API dfq_status dfq_image_create(uint32_t h, uint32_t w, uint32_t channels, const double* data,
                                    dfq_image** out);
/* i.i.d. N(0, 1) image; the start point of synthesis with the same seed. */
DFQ_API dfq_status dfq_image_gaussian(uint64_t seed, const dfq_model_config* config, dfq_image** out);
DFQ_API void dfq_image_shape(const dfq_image* image, uint32_t* h, uint32_t* w, uint32_t* channels);
DFQ_API const double* dfq_image_data(const dfq_image* image);
/* Lossless float container (.dfqi). */
DFQ_API dfq_status dfq_image_save(const dfq_image* image, const char* path);
DFQ_API dfq_status dfq_image_load(const char* path, dfq_image** out);
/* 8-bit min-max scaled PGM (1 channel) or PPM (3 channels). */
DFQ_API dfq_status dfq_image_write_pnm(const dfq_image* image, const char* path);
DFQ_API void dfq_image_free(dfq_image* image);

/* ---- synthesis --------------------------------------------------------- */

typedef enum dfq_entropy_sign {
  DFQ_ENTROPY_MAXIMIZE = 0, /* minimize L_SM - beta * entropy */
  DFQ_ENTROPY_MINIMIZE = 1  /* minimize L_SM + beta * entropy */
} dfq_entropy_sign;

typedef enum dfq_entropy_estimator {
  DFQ_ESTIMATOR_RESUBSTITUTION = 0,
  DFQ_ESTIMATOR_LEAVE_ONE_OUT = 1
} dfq_entropy_estimator;

typedef struct dfq_synth_config {
  double alpha;
  double beta;
  double eps1;
  double eps2; /* negative: max(1, 0.002 * H * W) */
  long total_iters;
  long evolve_iters;
  double lr;
  double lr_min;
  double adam_beta1;
  double adam_beta2;
  uint64_t seed;
  dfq_entropy_sign entropy_sign;
  dfq_entropy_estimator estimator;
} dfq_synth_config;

DFQ_API void dfq_synth_config_default(dfq_synth_config* config);
/* On DFQ_ERR_NUMERIC the message names the failing iteration and, when
 * last_good is not NULL, *last_good receives the last image with a finite
 * loss (NULL otherwise). */
DFQ_API dfq_status dfq_synthesize(const dfq_model* model, const dfq_synth_config* config, dfq_synthesis** out,
                                  dfq_image** last_good);
DFQ_API dfq_status dfq_synthesis_image(const dfq_synthesis* s, dfq_image** out);
DFQ_API size_t dfq_synthesis_num_masks(const dfq_synthesis* s);
/* Mask i: category, pixel count, peak score and birth iteration (any may be NULL). */
DFQ_API dfq_status dfq_synthesis_mask(const dfq_synthesis* s, size_t i, int* category, size_t* size,
                                      double* peak, long* birth);
DFQ_API size_t dfq_synthesis_rejected(const dfq_synthesis* s);
/* CSV columns iteration,l_sm,l_dm,l_is,num_masks. */
DFQ_API dfq_status dfq_synthesis_write_trace(const dfq_synthesis* s, const char* path);
/* PPM of the image with accepted masks tinted by class. */
DFQ_API dfq_status dfq_synthesis_write_overlay(const dfq_synthesis* s, const char* path);
DFQ_API void dfq_synthesis_free(dfq_synthesis* s);

/* ---- quantization ------------------------------------------------------ */

typedef enum dfq_norm_mode {
  DFQ_NORM_REPARAMETERIZED = 0, /* per-channel calibration folded to per-layer */
  DFQ_NORM_PER_LAYER = 1,
  DFQ_NORM_PER_CHANNEL = 2 /* reference only */
} dfq_norm_mode;

DFQ_API dfq_status dfq_quantize(const dfq_model* model, const dfq_image* const* calib, size_t count, int w_bits,
                                int a_bits, dfq_norm_mode mode, dfq_quantized** out);
/* e.g. "W4/A4, weights per-channel, activations per-layer"; owned by q. */
DFQ_API const char* dfq_quantized_describe(const dfq_quantized* q);
DFQ_API void dfq_quantized_get_config(const dfq_quantized* q, dfq_model_config* config);
DFQ_API void dfq_quantized_bits(const dfq_quantized* q, int* w_bits, int* a_bits);
DFQ_API dfq_status dfq_quantized_save(const dfq_quantized* q, const char* path);
DFQ_API dfq_status dfq_quantized_load(const char* path, dfq_quantized** out);
DFQ_API void dfq_quantized_free(dfq_quantized* q);

/* ---- evaluation -------------------------------------------------------- */

typedef enum dfq_calib_source {
  DFQ_SOURCE_NONE = 0,
  DFQ_SOURCE_SYNTHESIZED = 1,
  DFQ_SOURCE_GAUSSIAN = 2,
  DFQ_SOURCE_REAL = 3
} dfq_calib_source;

DFQ_API dfq_status dfq_evaluate_model(const dfq_model* model, const dfq_dataset* data, dfq_report** out);
DFQ_API dfq_status dfq_evaluate_quantized(const dfq_quantized* q, const dfq_dataset* data, dfq_report** out);
/* Metadata carried into the CSV. */
DFQ_API void dfq_report_set_origin(dfq_report* r, dfq_calib_source source, uint64_t seed);
DFQ_API double dfq_report_mean_iou(const dfq_report* r);
DFQ_API size_t dfq_report_num_masks(const dfq_report* r);
/* "W/A", owned by r. */
DFQ_API const char* dfq_report_precision(const dfq_report* r);
DFQ_API uint64_t dfq_report_size_bytes(const dfq_report* r);
DFQ_API uint64_t dfq_report_bops(const dfq_report* r);
DFQ_API dfq_status dfq_report_write_csv(const dfq_report* r, const char* dataset_name, const char* path);
/* image,class,iou per labeled mask. */
DFQ_API dfq_status dfq_report_write_masks_csv(const dfq_report* r, const char* path);
DFQ_API void dfq_report_free(dfq_report* r);

DFQ_API dfq_status dfq_model_size_bytes(const dfq_model_config* config, int w_bits, uint64_t* out);
DFQ_API dfq_status dfq_bops(const dfq_model_config* config, int w_bits, int a_bits, uint64_t* out);

typedef struct dfq_calib_set {
  dfq_calib_source source;
  const dfq_image* const* images;
  size_t count;
} dfq_calib_set;

/* Full-precision row, then one row per (set, bits) in the given order. */
DFQ_API dfq_status dfq_compare(const dfq_model* model, const dfq_dataset* data, const dfq_calib_set* sets,
                               size_t num_sets, const int* bits, size_t num_bits, const char* dataset_name,
                               uint64_t seed, dfq_table** out);
DFQ_API size_t dfq_table_rows(const dfq_table* t);
DFQ_API dfq_status dfq_table_row(const dfq_table* t, size_t i, dfq_calib_source* source, int* w_bits,
                                 int* a_bits, double* mean_iou);
/* CSV columns method,source,w_bits,a_bits,size_bytes,bops,dataset,mean_iou,seed. */
DFQ_API dfq_status dfq_table_write_csv(const dfq_table* t, const char* path);
DFQ_API void dfq_table_free(dfq_table* t);

#ifdef __cplusplus
}
#endif

#endif /* DFQ_DFQ_H */

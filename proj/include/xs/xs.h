#ifndef XS_XS_H
#define XS_XS_H

/* C interface to the cross-spectral stereo library. All functions return an
 * xs_status; on failure xs_last_error() describes the problem (thread-local,
 * valid until the next call on the same thread). Strings returned through
 * char** must be released with xs_string_free. */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define XS_API __declspec(dllexport)
#else
#define XS_API __attribute__((visibility("default")))
#endif

typedef enum xs_status {
  XS_OK = 0,
  XS_ERR_ARGUMENT = 1,
  XS_ERR_CONFIG = 2,
  XS_ERR_IO = 3,
  XS_ERR_TRAINING = 4,
  XS_ERR_INTERNAL = 5
} xs_status;

typedef enum xs_direction { XS_A2B = 0, XS_B2A = 1 } xs_direction;

typedef enum xs_oracle { XS_ORACLE_NONE = 0, XS_ORACLE_BLOCK_MATCH = 1, XS_ORACLE_GT = 2 } xs_oracle;

typedef enum xs_log_level {
  XS_LOG_DEBUG = 0,
  XS_LOG_INFO = 1,
  XS_LOG_WARNING = 2,
  XS_LOG_ERROR = 3,
  XS_LOG_OFF = 4
} xs_log_level;

typedef struct xs_config xs_config;
typedef struct xs_model xs_model;

XS_API const char* xs_last_error(void);
XS_API const char* xs_version(void);
XS_API void xs_string_free(char* s);
XS_API void xs_set_log_level(xs_log_level level);

/* Configuration. "default" holds the full-scale values; "desk" the 64x64,
 * batch-4 preset. xs_config_load parses a file over the given base (NULL:
 * full-scale defaults). */
XS_API xs_status xs_config_create_default(xs_config** out);
XS_API xs_status xs_config_create_desk(xs_config** out);
XS_API xs_status xs_config_load(const char* path, const xs_config* base, xs_config** out);
XS_API xs_status xs_config_clone(const xs_config* config, xs_config** out);
XS_API void xs_config_free(xs_config* config);
XS_API xs_status xs_config_set(xs_config* config, const char* key, const char* value);
XS_API xs_status xs_config_get(const xs_config* config, const char* key, char** value);
XS_API xs_status xs_config_serialize(const xs_config* config, char** text);

/* Models: the six networks plus the config they were trained with. */
XS_API xs_status xs_model_create(const xs_config* config, xs_model** out);
XS_API xs_status xs_model_load(const char* checkpoint_dir, xs_model** out);
XS_API xs_status xs_model_save(const xs_model* model, const char* checkpoint_dir);
XS_API void xs_model_free(xs_model* model);

typedef void (*xs_progress_fn)(int epoch, long long iteration, double loss_d, double loss_g,
                               double loss_smn, double loss_aux, void* user);

/* Trains on a manifest. Writes out_dir/config.txt, out_dir/losses.tsv and
 * checkpoints under out_dir/checkpoints. Absent losses are reported as NaN. */
XS_API xs_status xs_train(const xs_config* config, const char* manifest, const char* out_dir,
                          int resume, xs_progress_fn progress, void* user);

XS_API xs_status xs_translate_file(const xs_model* model, const char* image_path,
                                   xs_direction direction, const char* out_path);

typedef struct xs_eval_summary {
  double rmse;
  double mean_abs_error;
  double coverage;
  double region_mean;
  int pairs;
} xs_eval_summary;

/* Evaluates the model on a manifest with ground truth: writes
 * out_dir/report.tsv, predicted disparities and six diagnostic images per
 * pair. With an oracle, the same scoring is applied to the oracle's output and
 * written to out_dir/oracle_report.tsv; oracle_summary may then be non-NULL. */
XS_API xs_status xs_evaluate(const xs_model* model, const char* manifest, const char* out_dir,
                             xs_oracle oracle, xs_eval_summary* summary,
                             xs_eval_summary* oracle_summary);

typedef void (*xs_check_fn)(const char* suite, const char* name, int passed, const char* detail,
                            void* user);

/* subset: "grad", "invariants", "oracle" or "all". */
XS_API xs_status xs_run_checks(const char* subset, unsigned long long seed, xs_check_fn callback,
                               void* user, int* failures);

/* Writes count synthetic pairs (PNG views + 16-bit ground truth) and
 * out_dir/manifest.txt. */
XS_API xs_status xs_generate_synthetic(const char* out_dir, int count, int height, int width,
                                       int max_layers, int min_disparity, int max_disparity,
                                       int cross_spectral, unsigned long long seed);

#ifdef __cplusplus
}
#endif

#endif

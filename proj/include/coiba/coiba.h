/* C interface to the coiba attribution library.
 *
 * Objects are opaque handles created by coiba_*_create/load/... and released
 * with the matching coiba_*_free. Every fallible call returns a coiba_status;
 * on failure coiba_last_error() holds a one-line message for the calling
 * thread. Strings returned through char** are owned by the caller and must be
 * released with coiba_string_free.
 */
#ifndef COIBA_H
#define COIBA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define COIBA_API __declspec(dllexport)
#else
#define COIBA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum coiba_status {
  COIBA_OK = 0,
  COIBA_ERR_CONFIG = 2,
  COIBA_ERR_RUNTIME = 3,
  COIBA_ERR_IO = 4
} coiba_status;

typedef struct coiba_config coiba_config;
typedef struct coiba_model coiba_model;
typedef struct coiba_dataset coiba_dataset;
typedef struct coiba_maps coiba_maps;

COIBA_API const char* coiba_version(void);
/* Message of the last failed call on this thread ("" if none). */
COIBA_API const char* coiba_last_error(void);
/* Error category of the last failure, e.g. "config", "io", "optimization". */
COIBA_API const char* coiba_last_error_kind(void);
COIBA_API void coiba_string_free(char* text);

/* ---- configuration ---- */
COIBA_API coiba_status coiba_config_default(coiba_config** out);
COIBA_API coiba_status coiba_config_parse(const char* json, coiba_config** out);
COIBA_API coiba_status coiba_config_load(const char* path, coiba_config** out);
/* Applies a JSON merge patch (RFC 7396) and re-validates. On failure the
 * config is left unchanged. */
COIBA_API coiba_status coiba_config_merge(coiba_config* config, const char* json_patch);
COIBA_API coiba_status coiba_config_to_json(const coiba_config* config, char** out);
COIBA_API coiba_status coiba_config_digest(const coiba_config* config, char** out);
COIBA_API void coiba_config_free(coiba_config* config);

/* ---- datasets ---- */
/* Synthetic dataset from the config's seed, split into train and held-out. */
COIBA_API coiba_status coiba_dataset_generate(const coiba_config* config, coiba_dataset** train,
                                              coiba_dataset** heldout);
COIBA_API coiba_status coiba_dataset_load(const char* manifest_path, coiba_dataset** out);
/* Writes manifest.csv plus image and mask PGMs into dir. */
COIBA_API coiba_status coiba_dataset_save(const coiba_dataset* dataset, const char* dir);
COIBA_API size_t coiba_dataset_size(const coiba_dataset* dataset);
/* Copies samples [first, first + count), clamped to the dataset size. */
COIBA_API coiba_status coiba_dataset_slice(const coiba_dataset* dataset, size_t first, size_t count,
                                           coiba_dataset** out);
COIBA_API void coiba_dataset_free(coiba_dataset* dataset);

/* ---- models ---- */
COIBA_API coiba_status coiba_model_init(const coiba_config* config, coiba_model** out);
/* Trains from a fresh initialization. heldout_accuracy and log_csv may be
 * NULL. */
COIBA_API coiba_status coiba_model_train(const coiba_config* config, const coiba_dataset* train,
                                         const coiba_dataset* heldout, coiba_model** out,
                                         double* heldout_accuracy, char** log_csv);
COIBA_API coiba_status coiba_model_load(const char* path, coiba_model** out);
COIBA_API coiba_status coiba_model_save(const coiba_model* model, const char* path);
COIBA_API coiba_status coiba_model_digest(const coiba_model* model, char** out);
COIBA_API coiba_status coiba_model_accuracy(const coiba_model* model, const coiba_dataset* dataset,
                                            double* out);
COIBA_API void coiba_model_free(coiba_model* model);

/* ---- attribution ---- */
/* One map per sample with the config's bottleneck settings. calibration may be
 * NULL unless the config uses calibration statistics. */
COIBA_API coiba_status coiba_attribute(const coiba_model* model, const coiba_dataset* samples,
                                       const coiba_config* config, const coiba_dataset* calibration,
                                       size_t jobs, coiba_maps** out);
COIBA_API size_t coiba_maps_size(const coiba_maps* maps);
/* Borrowed pointer, valid until the maps are freed. */
COIBA_API coiba_status coiba_maps_token_scores(const coiba_maps* maps, size_t index, const double** scores,
                                               size_t* count);
COIBA_API coiba_status coiba_maps_runtime_ms(const coiba_maps* maps, size_t index, double* out);
/* Mean capacity (nats) per hooked layer, first layer first. Borrowed
 * pointer, valid until the maps are freed. */
COIBA_API coiba_status coiba_maps_layer_capacity(const coiba_maps* maps, size_t index, const double** values,
                                                 size_t* count);
/* 1 if the first-layer capacity is at least the mean over hooked layers. */
COIBA_API coiba_status coiba_maps_upper_bound_holds(const coiba_maps* maps, size_t index, int* out);
/* map_NNNNN.pgm and map_NNNNN.json per sample. */
COIBA_API coiba_status coiba_maps_save(const coiba_maps* maps, const char* dir);
/* Reads map_NNNNN.json for each sample of `samples`. */
COIBA_API coiba_status coiba_maps_load(const char* dir, const coiba_dataset* samples,
                                       const coiba_config* config, coiba_maps** out);
COIBA_API void coiba_maps_free(coiba_maps* maps);

/* ---- studies ----
 * Each writes its files into out_dir (created if needed) and returns a JSON
 * summary through summary_json (may be NULL). */
COIBA_API coiba_status coiba_evaluate(const coiba_model* model, const coiba_dataset* samples,
                                      const coiba_maps* maps, const coiba_config* config, size_t jobs,
                                      const char* out_dir, char** summary_json);
COIBA_API coiba_status coiba_compare_layers(const coiba_model* model, const coiba_dataset* samples,
                                            const coiba_config* config, const coiba_dataset* calibration,
                                            size_t jobs, const char* out_dir, char** summary_json);
COIBA_API coiba_status coiba_sanity_check(const coiba_model* model, const coiba_dataset* samples,
                                          const coiba_config* config, const coiba_dataset* calibration,
                                          size_t jobs, const char* out_dir, char** summary_json);
/* axis: "beta", "layers", "uniform-channel" or "readout". */
COIBA_API coiba_status coiba_ablate(const coiba_model* model, const coiba_dataset* samples,
                                    const coiba_config* config, const char* axis,
                                    const coiba_dataset* calibration, size_t jobs, const char* out_dir,
                                    char** summary_json);

#ifdef __cplusplus
}
#endif

#endif /* COIBA_H */

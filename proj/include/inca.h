#ifndef INCA_H
#define INCA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define INCA_API __attribute__((visibility("default")))
#else
#define INCA_API
#endif

typedef enum inca_status {
  INCA_OK = 0,
  INCA_ERR_CONFIG = 1,
  INCA_ERR_DIMENSION = 2,
  INCA_ERR_RANGE = 3,
  INCA_ERR_FORMAT = 4,
  INCA_ERR_IO = 5,
  INCA_ERR_CONTRACT = 6,
  INCA_ERR_INCOMPATIBLE = 7,
  INCA_ERR_RESOURCE = 8,
  INCA_ERR_ARGUMENT = 9,
  INCA_ERR_INTERNAL = 10
} inca_status;

typedef struct inca_config inca_config;
typedef struct inca_adapter inca_adapter;

INCA_API const char* inca_version(void);
INCA_API const char* inca_status_name(inca_status status);
/* Message of the last failed call on this thread; "" when none. */
INCA_API const char* inca_last_error(void);

/* Configuration: every key has a default, unknown keys are rejected. */
INCA_API inca_status inca_config_create(inca_config** out);
INCA_API inca_status inca_config_load(const char* path, inca_config** out);
/* "section.key=value" */
INCA_API inca_status inca_config_set(inca_config* cfg, const char* assignment);
/* The returned string lives until the next call on `cfg`. */
INCA_API inca_status inca_config_get(const inca_config* cfg, const char* key, const char** value);
/* Writes the resolved INI text; `needed` receives the size including NUL. */
INCA_API inca_status inca_config_dump(const inca_config* cfg, char* buf, size_t cap, size_t* needed);
INCA_API void inca_config_destroy(inca_config* cfg);

INCA_API size_t inca_command_count(void);
INCA_API const char* inca_command_name(size_t index);
/* Runs one subcommand, writing artifacts under out_dir. */
INCA_API inca_status inca_run(const inca_config* cfg, const char* command, const char* out_dir,
                              int deterministic, size_t* artifacts_written);

/* Adapters. kind is one of "inca", "open-inca", "lp", "mlp3". */
INCA_API inca_status inca_adapter_create(const char* kind, size_t dim, size_t heads, size_t queries,
                                         int classes, uint64_t seed, inca_adapter** out);
INCA_API inca_status inca_adapter_load(const char* path, inca_adapter** out);
INCA_API inca_status inca_adapter_save(const inca_adapter* a, const char* path);
INCA_API inca_status inca_adapter_param_count(const inca_adapter* a, size_t* out);
INCA_API inca_status inca_adapter_classes(const inca_adapter* a, size_t* out);
/* tokens is dim x n_tokens row-major (tokens are columns). */
INCA_API inca_status inca_adapter_logits(const inca_adapter* a, const float* tokens, size_t dim,
                                         size_t n_tokens, float* out, size_t out_cap, size_t* n_out);
INCA_API void inca_adapter_destroy(inca_adapter* a);

#ifdef __cplusplus
}
#endif

#endif

#ifndef INTERPROMPT_H
#define INTERPROMPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum IpStatus {
  IP_STATUS_OK = 0,
  IP_STATUS_NULL_POINTER = 1,
  IP_STATUS_INVALID_UTF8 = 2,
  IP_STATUS_INVALID_ARGUMENT = 3,
  IP_STATUS_CONFIG_ERROR = 4,
  IP_STATUS_DATA_ERROR = 5,
  IP_STATUS_BACKEND_ERROR = 6,
  IP_STATUS_BACKEND_UNREACHABLE = 7,
  IP_STATUS_PANIC = 8,
} IpStatus;

// Opaque engine: backends, example pool and episode config from one run
// configuration file.
typedef struct IpEngine IpEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ip_version(void);

// Message of the last failed call on this thread, or NULL. Valid until
// the next call on the same thread.
const char *ip_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void ip_string_free(char *s);

// Builds an engine from a run configuration file (JSON).
//
// # Safety
// `config_path` must be a NUL-terminated string; `out` must be writable.
enum IpStatus ip_engine_new(const char *config_path, struct IpEngine **out);

// Releases an engine. NULL is ignored.
//
// # Safety
// `engine` must come from [`ip_engine_new`] and not have been freed.
void ip_engine_free(struct IpEngine *engine);

// Replaces the engine's episode config with a JSON object.
//
// # Safety
// `engine` must be a live handle; `config_json` NUL-terminated.
enum IpStatus ip_engine_set_config(struct IpEngine *engine, const char *config_json);

// Current episode config as JSON.
//
// # Safety
// `engine` must be a live handle; `out` writable.
enum IpStatus ip_engine_config(const struct IpEngine *engine, char **out);

// Runs one episode for a sample given as JSON and returns the reasoning
// trace as JSON. Stage failures are reported inside the trace, not as a
// status.
//
// # Safety
// `engine` must be a live handle; `sample_json` NUL-terminated; `out`
// writable.
enum IpStatus ip_engine_run_episode(const struct IpEngine *engine,
                                    const char *sample_json,
                                    char **out);

// Normalized form of an answer string.
//
// # Safety
// `raw` NUL-terminated; `out` writable.
enum IpStatus ip_normalize_answer(const char *raw, char **out);

// Soft VQA accuracy of `pred` against a JSON array of annotator answers.
//
// # Safety
// Strings NUL-terminated; `out` writable.
enum IpStatus ip_vqa_soft_accuracy(const char *pred, const char *answers_json, double *out);

// Sentence BLEU of `candidate` against a JSON array of references.
//
// # Safety
// Strings NUL-terminated; `out` writable.
enum IpStatus ip_bleu(const char *candidate,
                      const char *references_json,
                      uint32_t max_n,
                      bool lowercase,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERPROMPT_H */

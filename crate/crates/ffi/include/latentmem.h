#ifndef LATENTMEM_H
#define LATENTMEM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmStatus {
  LM_STATUS_OK = 0,
  LM_STATUS_NULL_ARGUMENT = 1,
  LM_STATUS_INVALID_UTF8 = 2,
  LM_STATUS_CONFIG = 3,
  LM_STATUS_IO = 4,
  LM_STATUS_CHECKPOINT = 5,
  LM_STATUS_INVALID_INPUT = 6,
  LM_STATUS_BUFFER_TOO_SMALL = 7,
  LM_STATUS_PANIC = 8,
} LmStatus;

// Frozen language model.
typedef struct LmBackbone LmBackbone;

// Experience bank with its embedder.
typedef struct LmBank LmBank;

// Memory composer bound to the backbone it was created with.
typedef struct LmComposer LmComposer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string. Do not free.
const char *lm_version(void);

// Copy of the last error message on this thread, or null when the last
// call succeeded. Free with `lm_string_free`.
char *lm_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void lm_string_free(char *s);

// Resolves config text (`key = value` lines) over the defaults and writes
// the full resolved config to `out`.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum LmStatus lm_config_resolve(const char *text, char **out);

// Loads a backbone checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LmStatus lm_backbone_load(const char *path, struct LmBackbone **out);

// SHA-256 of the backbone parameters as hex.
//
// # Safety
// `backbone` must be a live handle; `out` must be writable.
enum LmStatus lm_backbone_fingerprint(const struct LmBackbone *backbone, char **out);

// # Safety
// `backbone` must be null or a handle not yet freed.
void lm_backbone_free(struct LmBackbone *backbone);

// Reference key/value trajectories for worlds `0..n_worlds`, `per_world`
// each, two-agent chain.
//
// # Safety
// `backbone` must be a live handle; `out` must be writable.
enum LmStatus lm_bank_bootstrap(const struct LmBackbone *backbone,
                                uint64_t n_worlds,
                                size_t per_world,
                                size_t embed_chars,
                                struct LmBank **out);

// Loads a JSONL bank, embedding with the backbone's token table.
//
// # Safety
// `backbone` must be a live handle, `path` a NUL-terminated string and
// `out` writable.
enum LmStatus lm_bank_load(const struct LmBackbone *backbone,
                           const char *path,
                           size_t embed_chars,
                           struct LmBank **out);

// # Safety
// `bank` must be a live handle; `path` a NUL-terminated string.
enum LmStatus lm_bank_save(const struct LmBank *bank, const char *path);

// # Safety
// `bank` must be a live handle; `out` must be writable.
enum LmStatus lm_bank_len(const struct LmBank *bank, size_t *out);

// Top-`k` entries for `query` as a JSON array of
// `{"index", "similarity", "trajectory"}` objects, best first.
//
// # Safety
// `bank` must be a live handle, `query` a NUL-terminated string and `out`
// writable.
enum LmStatus lm_bank_query(const struct LmBank *bank, const char *query, size_t k, char **out);

// # Safety
// `bank` must be null or a handle not yet freed.
void lm_bank_free(struct LmBank *bank);

// Fresh composer with default sizes except `latent_len`.
//
// # Safety
// `backbone` must be a live handle; `out` must be writable.
enum LmStatus lm_composer_init(const struct LmBackbone *backbone,
                               size_t latent_len,
                               uint64_t seed,
                               struct LmComposer **out);

// Loads composer weights trained against `backbone`.
//
// # Safety
// `backbone` must be a live handle, `path` a NUL-terminated string and
// `out` writable.
enum LmStatus lm_composer_load(const struct LmBackbone *backbone,
                               const char *path,
                               struct LmComposer **out);

// Shape of every memory this composer produces.
//
// # Safety
// `composer` must be a live handle; `rows` and `cols` must be writable.
enum LmStatus lm_composer_shape(const struct LmComposer *composer, size_t *rows, size_t *cols);

// Retrieves the top-`k` trajectories for `query` and writes the latent
// memory for `role` row-major into `buf`. `written` receives the number of
// floats needed; when `capacity` is smaller nothing is copied and
// `BufferTooSmall` is returned.
//
// # Safety
// Handles must be live, strings NUL-terminated, `buf` valid for `capacity`
// floats and `written` writable.
enum LmStatus lm_composer_compose(const struct LmComposer *composer,
                                  const struct LmBank *bank,
                                  const char *role,
                                  const char *query,
                                  size_t k,
                                  float *buf,
                                  size_t capacity,
                                  size_t *written);

// # Safety
// `composer` must be null or a handle not yet freed.
void lm_composer_free(struct LmComposer *composer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTMEM_H */

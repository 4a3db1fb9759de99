#ifndef PATHVLM_H
#define PATHVLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum PvlmStatus {
  PVLM_STATUS_OK = 0,
  PVLM_STATUS_NULL_POINTER = 1,
  PVLM_STATUS_INVALID_UTF8 = 2,
  PVLM_STATUS_INVALID_INPUT = 3,
  PVLM_STATUS_CONFIG = 4,
  PVLM_STATUS_IO = 5,
  PVLM_STATUS_CHECKPOINT = 6,
  PVLM_STATUS_CONTEXT_OVERFLOW = 7,
  PVLM_STATUS_JUDGE = 8,
  PVLM_STATUS_INTERNAL = 9,
  PVLM_STATUS_PANIC = 10,
} PvlmStatus;

// Loaded assistant. Opaque to C.
typedef struct PvlmModel PvlmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *pvlm_last_error(void);

// Library version as a static NUL-terminated string.
const char *pvlm_version(void);

// Loads an assistant checkpoint directory.
//
// # Safety
// `checkpoint_dir` must be a NUL-terminated string; `out_model` must be writable.
enum PvlmStatus pvlm_model_load(const char *checkpoint_dir, struct PvlmModel **out_model);

// Frees a model. NULL is ignored.
//
// # Safety
// `model` must come from [`pvlm_model_load`] and not be used afterwards.
void pvlm_model_free(struct PvlmModel *model);

// Greedy answer for an image given by path or `synth:` reference. The
// answer is written to `out_text` and must be freed with [`pvlm_string_free`].
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum PvlmStatus pvlm_model_generate(const struct PvlmModel *model,
                                    const char *image_ref,
                                    const char *question,
                                    size_t max_new_tokens,
                                    char **out_text);

// Same as [`pvlm_model_generate`] for an 8-bit RGB buffer of
// `height * width * 3` bytes, row-major, channel-last.
//
// # Safety
// `rgb` must point to `height * width * 3` readable bytes.
enum PvlmStatus pvlm_model_generate_rgb(const struct PvlmModel *model,
                                        const uint8_t *rgb,
                                        size_t height,
                                        size_t width,
                                        const char *question,
                                        size_t max_new_tokens,
                                        char **out_text);

// Frees a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void pvlm_string_free(char *s);

// Fraction of ground-truth tokens present in the prediction.
//
// # Safety
// Strings must be NUL-terminated; `out_recall` writable.
enum PvlmStatus pvlm_open_recall(const char *pred, const char *gt, double *out_recall);

// Tile grid chosen for an `height`×`width` image.
//
// # Safety
// `out_rows` and `out_cols` must be writable.
enum PvlmStatus pvlm_plan_tiles(size_t height,
                                size_t width,
                                size_t tile_size,
                                size_t max_tiles,
                                size_t *out_rows,
                                size_t *out_cols);

// Learning rate at `step` for a schedule given as JSON.
//
// # Safety
// `spec_json` must be NUL-terminated; `out_lr` writable.
enum PvlmStatus pvlm_schedule_lr(const char *spec_json, size_t step, double *out_lr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATHVLM_H */

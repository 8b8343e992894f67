#ifndef COMER_H
#define COMER_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Growth class of the inference count.
 */
typedef enum ComerItc {
  COMER_ITC_CONSTANT = 0,
  COMER_ITC_LINEAR = 1,
  COMER_ITC_PRODUCT = 2,
} ComerItc;

/*
 Result code of every call.
 */
typedef enum ComerStatus {
  COMER_STATUS_OK = 0,
  COMER_STATUS_NULL_POINTER = 1,
  COMER_STATUS_INVALID_UTF8 = 2,
  COMER_STATUS_CONFIG = 3,
  COMER_STATUS_DATA = 4,
  COMER_STATUS_NUMERIC = 5,
  COMER_STATUS_CHECKSUM = 6,
  COMER_STATUS_IO = 7,
  COMER_STATUS_PANIC = 8,
  COMER_STATUS_INTERNAL = 9,
} ComerStatus;

/*
 Opaque loaded model.
 */
typedef struct ComerModel ComerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *comer_version(void);

/*
 Message of the calling thread's last failure, or an empty string. The
 pointer stays valid until the thread's next call into the library.
 */
const char *comer_last_error(void);

/*
 Loads a checkpoint. `embedding_path` may be null; it is only read for
 checkpoints trained on an embedding file, in place of the recorded path.

 # Safety
 String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum ComerStatus comer_model_load(const char *checkpoint_path,
                                  const char *embedding_path,
                                  struct ComerModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`comer_model_load`] and not be freed twice.
 */
void comer_model_free(struct ComerModel *model);

/*
 Number of scalar parameters.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum ComerStatus comer_model_param_count(const struct ComerModel *model, uint64_t *out);

/*
 Predicts one turn. `system` and `previous_json` may be null; the
 previous state is a JSON object `{"domain": {"slot": "value"}}`. On
 success `*out` holds `{"belief": {...}, "flat": "...", "decode_calls": n}`,
 to be released with [`comer_string_free`].

 # Safety
 `model` must be a live handle; strings must be null or NUL-terminated;
 `out` must be writable.
 */
enum ComerStatus comer_predict_turn(const struct ComerModel *model,
                                    const char *system,
                                    const char *user,
                                    const char *previous_json,
                                    char **out);

/*
 Releases a string returned by the library. Null is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void comer_string_free(char *s);

/*
 Inference time multiplier for moving from dataset 1 to dataset 2.

 # Safety
 `out` must be writable.
 */
enum ComerStatus comer_itm(double t1,
                           double s1,
                           double n1,
                           double m1,
                           double t2,
                           double s2,
                           double n2,
                           double m2,
                           enum ComerItc itc,
                           double *out);

/*
 Validates an embedding file and reports its dimension. `out_dim` may be
 null.

 # Safety
 `path` must be NUL-terminated; `out_dim` must be null or writable.
 */
enum ComerStatus comer_embeddings_validate(const char *path, uint64_t *out_dim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMER_H */

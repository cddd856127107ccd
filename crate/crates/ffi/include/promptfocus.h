#ifndef PROMPTFOCUS_H
#define PROMPTFOCUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_ARGUMENT = 1,
  PF_STATUS_INVALID_UTF8 = 2,
  PF_STATUS_IO = 3,
  PF_STATUS_FORMAT = 4,
  PF_STATUS_EMPTY_SELECTION = 5,
  PF_STATUS_CONFIG = 6,
  PF_STATUS_CONTRACT = 7,
  PF_STATUS_OUT_OF_RANGE = 8,
  PF_STATUS_PANIC = 9,
} PfStatus;

/**
 * A category library with its embedding table.
 */
typedef struct PfFixture PfFixture;

/**
 * One prompt selection; class names are kept as C strings for borrowing.
 */
typedef struct PfSelection PfSelection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *pf_last_error(void);

/**
 * Loads an `.embt` fixture and its JSON manifest.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_fixture_load(const char *path, struct PfFixture **out);

/**
 * The built-in 20-class street fixture.
 *
 * # Safety
 * `out` must be writable.
 */
enum PfStatus pf_fixture_street(struct PfFixture **out);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `fixture` must be null or a live handle.
 */
size_t pf_fixture_len(const struct PfFixture *fixture);

/**
 * Embedding dimension, or 0 for a null handle.
 *
 * # Safety
 * `fixture` must be null or a live handle.
 */
size_t pf_fixture_dim(const struct PfFixture *fixture);

/**
 * # Safety
 * `fixture` must be null or a handle not yet freed.
 */
void pf_fixture_free(struct PfFixture *fixture);

/**
 * Selects class prompts for a unit-norm image embedding of length `dim`.
 *
 * `config_json` is null for defaults or a flat JSON object whose keys are
 * selection settings, e.g. `{"max_classes": 10}`.
 *
 * # Safety
 * `image` must point to `dim` doubles; `config_json` must be null or a
 * NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_select(const struct PfFixture *fixture,
                        const double *image,
                        size_t dim,
                        const char *config_json,
                        struct PfSelection **out);

/**
 * Number of selected classes, or 0 for a null handle.
 *
 * # Safety
 * `selection` must be null or a live handle.
 */
size_t pf_selection_len(const struct PfSelection *selection);

/**
 * Borrowed name of class `index`, valid while the handle lives; null if
 * out of range.
 *
 * # Safety
 * `selection` must be null or a live handle.
 */
const char *pf_selection_class(const struct PfSelection *selection, size_t index);

/**
 * Probability of class `index`.
 *
 * # Safety
 * `selection` must be a live handle; `out` must be writable.
 */
enum PfStatus pf_selection_sim(const struct PfSelection *selection, size_t index, double *out);

/**
 * The whole selection as JSON; free the string with [`pf_string_free`].
 *
 * # Safety
 * `selection` must be a live handle; `out` must be writable.
 */
enum PfStatus pf_selection_json(const struct PfSelection *selection, char **out);

/**
 * # Safety
 * `selection` must be null or a handle not yet freed.
 */
void pf_selection_free(struct PfSelection *selection);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void pf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPTFOCUS_H */

#ifndef STAGEPIPE_H
#define STAGEPIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Predicted-label value marking output that never satisfied the schema.
 */
#define SP_UNPARSEABLE -1

/*
 Result code of every fallible call.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  SP_STATUS_INVALID_ARGUMENT = 3,
  SP_STATUS_IO = 4,
  SP_STATUS_PARSE = 5,
  SP_STATUS_CATEGORY_MISMATCH = 6,
  SP_STATUS_INTERNAL = 99,
} SpStatus;

typedef enum SpCategory {
  SP_CATEGORY_T = 0,
  SP_CATEGORY_N = 1,
} SpCategory;

/*
 Opaque rule memory.
 */
typedef struct SpMemory SpMemory;

/*
 One gated-update step.
 */
typedef struct SpUpdateTrace {
  size_t step;
  size_t proposed_len;
  size_t current_len;
  size_t distance;
  double similarity;
  bool accepted;
} SpUpdateTrace;

/*
 Per-class and macro-averaged precision, recall and F1. Class `i` is the
 i-th label of the category (T1..T4 or N0..N3).
 */
typedef struct SpMetrics {
  double precision;
  double recall;
  double f1;
  double class_precision[4];
  double class_recall[4];
  double class_f1[4];
} SpMetrics;

/*
 Message for the last failed call on this thread; empty if none. The pointer
 stays valid until the next failing call on this thread.
 */
const char *sp_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sp_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void sp_string_free(char *s);

/*
 Levenshtein distance over Unicode scalar values.

 # Safety
 `a` and `b` must be NUL-terminated strings; `out` must be writable.
 */
enum SpStatus sp_edit_distance(const char *a, const char *b, size_t *out);

/*
 Similarity on a 0-100 scale: `100 * (max_len - distance) / max_len`.

 # Safety
 As for [`sp_edit_distance`].
 */
enum SpStatus sp_similarity(const char *a, const char *b, double *out);

bool sp_gate_accepts(double similarity, double threshold);

/*
 Creates an empty memory (version 0).

 # Safety
 `out` must be writable.
 */
enum SpStatus sp_memory_new(enum SpCategory category, struct SpMemory **out);

/*
 Parses a memory from its JSON form.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_memory_from_json(const char *json, struct SpMemory **out);

/*
 Loads a memory file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_memory_load(const char *path, struct SpMemory **out);

/*
 # Safety
 `mem` must be a live handle; `path` a NUL-terminated string.
 */
enum SpStatus sp_memory_save(const struct SpMemory *mem, const char *path);

/*
 Releases a memory handle. Null is ignored.

 # Safety
 `mem` must come from this library and not have been freed.
 */
void sp_memory_free(struct SpMemory *mem);

/*
 # Safety
 `mem` must be a live handle or null (null yields 0).
 */
uint64_t sp_memory_version(const struct SpMemory *mem);

/*
 Number of rules held.

 # Safety
 `mem` must be a live handle or null (null yields 0).
 */
size_t sp_memory_rule_count(const struct SpMemory *mem);

/*
 The canonical rule serialization that the gate compares.

 # Safety
 `mem` must be a live handle; `out` writable. Free the result with
 [`sp_string_free`].
 */
enum SpStatus sp_memory_serialize(const struct SpMemory *mem, char **out);

/*
 JSON form of the memory, as written by [`sp_memory_save`].

 # Safety
 As for [`sp_memory_serialize`].
 */
enum SpStatus sp_memory_to_json(const struct SpMemory *mem, char **out);

/*
 Offers a candidate rule list to the memory gate, replacing the memory in
 place when accepted. An empty memory accepts unconditionally.

 # Safety
 `mem` must be a live handle; `rules` must point to `n_rules` NUL-terminated
 strings; `trace` may be null.
 */
enum SpStatus sp_memory_gated_update(struct SpMemory *mem,
                                     const char *const *rules,
                                     size_t n_rules,
                                     double threshold,
                                     size_t step,
                                     struct SpUpdateTrace *trace);

/*
 Macro metrics from parallel arrays of class indices (0..=3). A predicted
 value of [`SP_UNPARSEABLE`] counts as a miss for the gold class only.

 # Safety
 `gold` and `predicted` must each point to `n` values; `out` must be writable.
 */
enum SpStatus sp_score(enum SpCategory category,
                       const int32_t *gold,
                       const int32_t *predicted,
                       size_t n,
                       struct SpMetrics *out);

/*
 `100 * num / den` with one decimal, halves rounded away from zero.

 # Safety
 `out` must be writable; free the result with [`sp_string_free`].
 */
enum SpStatus sp_format_percent(uint64_t num, uint64_t den, char **out);

#endif  /* STAGEPIPE_H */

#ifndef KGCODER_H
#define KGCODER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

typedef enum KgcStatus {
  KGC_STATUS_OK = 0,
  KGC_STATUS_NULL_ARGUMENT = 1,
  KGC_STATUS_INVALID_UTF8 = 2,
  KGC_STATUS_IO = 3,
  KGC_STATUS_PARSE = 4,
  KGC_STATUS_INTEGRITY = 5,
  KGC_STATUS_PROTOCOL = 6,
  KGC_STATUS_INVALID_ARGUMENT = 7,
  KGC_STATUS_PANIC = 8,
} KgcStatus;

/**
 * Opaque knowledge graph handle.
 */
typedef struct KgcGraph KgcGraph;

/**
 * Opaque streaming protocol parser handle.
 */
typedef struct KgcStream KgcStream;

typedef struct KgcGraphStats {
  size_t entities;
  size_t triples;
  size_t packages;
  size_t functions;
  size_t attributes;
} KgcGraphStats;

/**
 * Library version; free with `kgc_string_free`.
 */
char *kgc_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Owned by the
 * library and valid until the next failing call on this thread.
 */
const char *kgc_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, freed at most once.
 */
void kgc_string_free(char *s);

/**
 * Loads a JSON-Lines triple file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgcStatus kgc_graph_load(const char *path, struct KgcGraph **out);

/**
 * Parses JSON-Lines triples held in memory.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgcStatus kgc_graph_parse(const char *text, struct KgcGraph **out);

/**
 * # Safety
 * `g` must be NULL or a handle from `kgc_graph_load`/`kgc_graph_parse`, freed at most once.
 */
void kgc_graph_free(struct KgcGraph *g);

/**
 * # Safety
 * `g` must be a live graph handle and `out` a valid pointer.
 */
enum KgcStatus kgc_graph_stats(const struct KgcGraph *g, struct KgcGraphStats *out);

/**
 * Package ids with their member ids, as a JSON object.
 *
 * # Safety
 * `g` must be a live graph handle and `out` a valid pointer.
 */
enum KgcStatus kgc_graph_anchors_json(const struct KgcGraph *g, char **out);

/**
 * Imported packages and called functions of Python source, as JSON.
 *
 * # Safety
 * `code` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgcStatus kgc_extract_usage_json(const char *code, char **out);

/**
 * Parses a complete transcript into JSON segments. On a protocol error the
 * byte offset is stored in `error_offset` when it is non-NULL.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` a valid pointer; `error_offset` NULL or valid.
 */
enum KgcStatus kgc_parse_transcript_json(const char *text, char **out, size_t *error_offset);

struct KgcStream *kgc_stream_new(void);

/**
 * Appends a chunk. After an error the stream stays failed.
 *
 * # Safety
 * `s` must be a live stream handle; `chunk` a NUL-terminated string; `error_offset` NULL or valid.
 */
enum KgcStatus kgc_stream_feed(struct KgcStream *s, const char *chunk, size_t *error_offset);

/**
 * The pending search as JSON `{"kind","query"}`, or NULL in `out` when none.
 *
 * # Safety
 * `s` must be a live stream handle and `out` a valid pointer.
 */
enum KgcStatus kgc_stream_pending_json(const struct KgcStream *s, char **out);

/**
 * # Safety
 * `s` must be a live stream handle.
 */
bool kgc_stream_is_complete(const struct KgcStream *s);

/**
 * # Safety
 * `s` must be NULL or a handle from `kgc_stream_new`, freed at most once.
 */
void kgc_stream_free(struct KgcStream *s);

/**
 * Renders the generation prompt from a task and an answer given as JSON
 * (`{"refined_knowledge": [...], "specialized_solution": "..."}`).
 *
 * # Safety
 * `task` and `answer_json` must be NUL-terminated strings and `out` a valid pointer.
 */
enum KgcStatus kgc_build_prompt(const char *task, const char *answer_json, char **out);

/**
 * First fenced code block of a reply, or the trimmed reply.
 *
 * # Safety
 * `reply` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KgcStatus kgc_extract_code(const char *reply, char **out);

#endif  /* KGCODER_H */

#ifndef CACHETYPE_H
#define CACHETYPE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_ARGUMENT = 1,
  CT_STATUS_INVALID_UTF8 = 2,
  CT_STATUS_PARSE = 3,
  CT_STATUS_INVALID_ARGUMENT = 4,
  CT_STATUS_ANALYSIS = 5,
  CT_STATUS_PANIC = 6,
} CtStatus;

typedef enum CtFindingKind {
  CT_FINDING_KIND_SDMA = 0,
  CT_FINDING_KIND_SDBC = 1,
  CT_FINDING_KIND_SDBC_LAYOUT_UNKNOWN = 2,
} CtFindingKind;

/**
 * Parsed secret and random annotations.
 */
typedef struct CtAnnotations CtAnnotations;

/**
 * Parsed branch layout table.
 */
typedef struct CtBranchTable CtBranchTable;

/**
 * An analysis result with its JSON rendering.
 */
typedef struct CtReport CtReport;

/**
 * A parsed execution trace.
 */
typedef struct CtTrace CtTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ct_last_error(void);

/**
 * # Safety
 * `text` must be a nul-terminated string and `out` a valid pointer.
 */
enum CtStatus ct_trace_parse(const char *text, struct CtTrace **out);

/**
 * Number of records, or 0 for null.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t ct_trace_len(const struct CtTrace *trace);

/**
 * # Safety
 * `trace` must be null or a handle not yet freed.
 */
void ct_trace_free(struct CtTrace *trace);

/**
 * # Safety
 * `text` must be a nul-terminated string and `out` a valid pointer.
 */
enum CtStatus ct_annotations_parse(const char *text, struct CtAnnotations **out);

/**
 * # Safety
 * `annotations` must be null or a handle not yet freed.
 */
void ct_annotations_free(struct CtAnnotations *annotations);

/**
 * # Safety
 * `text` must be a nul-terminated string and `out` a valid pointer.
 */
enum CtStatus ct_branch_table_parse(const char *text, struct CtBranchTable **out);

/**
 * # Safety
 * `table` must be null or a handle not yet freed.
 */
void ct_branch_table_free(struct CtBranchTable *table);

/**
 * Runs the analysis. `table` may be null, in which case secret-dependent
 * branches are reported with unknown layout. `cache_line_bits` must be in
 * 4..=12; `unit_gap` of 0 selects the default.
 *
 * # Safety
 * `trace` and `annotations` must be live handles, `table` null or live,
 * and `out` a valid pointer.
 */
enum CtStatus ct_analyze(const struct CtTrace *trace,
                         const struct CtAnnotations *annotations,
                         const struct CtBranchTable *table,
                         uint32_t cache_line_bits,
                         uint32_t unit_gap,
                         struct CtReport **out);

/**
 * Findings of one kind, or 0 for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t ct_report_count(const struct CtReport *report, enum CtFindingKind kind);

/**
 * Number of leakage units, or 0 for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t ct_report_units(const struct CtReport *report);

/**
 * The report as JSON, owned by the handle. Null for a null handle.
 *
 * # Safety
 * `report` must be null or a live handle; the string dies with it.
 */
const char *ct_report_json(const struct CtReport *report);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void ct_report_free(struct CtReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CACHETYPE_H */

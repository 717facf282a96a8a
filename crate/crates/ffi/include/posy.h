#ifndef POSY_H
#define POSY_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PosyEvent {
  POSY_EVENT_HANDSHAKE_COMPLETED = 0,
  POSY_EVENT_START_COMMAND_ACCEPTED = 1,
  POSY_EVENT_FUNCTION_INVOKED = 2,
  POSY_EVENT_COMPLETED_OK = 3,
  POSY_EVENT_FAILED = 4,
  POSY_EVENT_TIMEOUT_EXPIRED = 5,
  POSY_EVENT_TERMINATION_REQUESTED = 6,
} PosyEvent;

typedef enum PosyRunState {
  POSY_RUN_STATE_PENDING = 0,
  POSY_RUN_STATE_INITIALIZED = 1,
  POSY_RUN_STATE_STARTED = 2,
  POSY_RUN_STATE_RUNNING = 3,
  POSY_RUN_STATE_FINISHED = 4,
  POSY_RUN_STATE_ERROR = 5,
} PosyRunState;

typedef enum PosyStatus {
  POSY_STATUS_OK = 0,
  POSY_STATUS_NULL_ARGUMENT = 1,
  POSY_STATUS_INVALID_UTF8 = 2,
  POSY_STATUS_PARSE = 3,
  POSY_STATUS_INVALID = 4,
  POSY_STATUS_NOT_FOUND = 5,
  POSY_STATUS_ILLEGAL_TRANSITION = 6,
  POSY_STATUS_INTERNAL = 7,
  POSY_STATUS_PANIC = 8,
} PosyStatus;

/**
 * Workflow engine over one data root with the built-in simulated tools.
 */
typedef struct PosyEngine PosyEngine;

/**
 * Scores of one trace.
 */
typedef struct PosyTraceScores {
  double strict;
  double relaxed;
} PosyTraceScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *posy_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *posy_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void posy_string_free(char *s);

/**
 * Looks up the lifecycle transition for `event` in `state`. Illegal
 * pairs, including any event in a terminal state, return
 * `IllegalTransition` and leave `out` untouched.
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one state.
 */
enum PosyStatus posy_next_state(enum PosyRunState state,
                                enum PosyEvent event,
                                enum PosyRunState *out);

/**
 * Decodes one wire frame and writes its canonical encoding.
 *
 * # Safety
 * `frame` must be a nul-terminated string; `out` must be writable.
 */
enum PosyStatus posy_envelope_normalize(const char *frame, char **out);

/**
 * Parses a tool configuration file's text and writes
 * `{"spec", "version", "spec_hash"}` as JSON. Tools compare `spec_hash`
 * with the registry's copy.
 *
 * # Safety
 * `yaml` must be a nul-terminated string; `out` must be writable.
 */
enum PosyStatus posy_tool_config_parse(const char *yaml, char **out);

/**
 * Strict and relaxed tool-calling scores. Lists are comma separated agent
 * kinds such as `FETCH_DATA, ANALYZE_DATA, FINALIZE`.
 *
 * # Safety
 * `expected` and `actual` must be nul-terminated strings; `out` must be
 * writable.
 */
enum PosyStatus posy_score_trace(const char *expected,
                                 const char *actual,
                                 bool answer_correct,
                                 struct PosyTraceScores *out);

/**
 * Opens an engine. A NULL `data_dir` keeps everything in memory.
 *
 * # Safety
 * `data_dir` must be NULL or a nul-terminated string; `out` must be
 * writable.
 */
enum PosyStatus posy_engine_open(const char *data_dir, struct PosyEngine **out);

/**
 * # Safety
 * `engine` must be NULL or a handle from [`posy_engine_open`], not yet freed.
 */
void posy_engine_free(struct PosyEngine *engine);

/**
 * Validates a workflow document and writes its execution plan as JSON.
 * An invalid workflow returns `Invalid` with the violations in the error
 * message.
 *
 * # Safety
 * `engine` must be a live handle; `yaml` a nul-terminated string; `out`
 * writable.
 */
enum PosyStatus posy_engine_validate_workflow(const struct PosyEngine *engine,
                                              const char *yaml,
                                              char **out);

/**
 * Runs a workflow with the simulated executor and writes
 * `{"execution_id", "workflow_id", "order", "states", "runs"}`.
 *
 * # Safety
 * As for [`posy_engine_validate_workflow`].
 */
enum PosyStatus posy_engine_run_workflow(const struct PosyEngine *engine,
                                         const char *yaml,
                                         char **out);

/**
 * Writes the stored run record as JSON.
 *
 * # Safety
 * `engine` must be a live handle; `run_id` a nul-terminated string; `out`
 * writable.
 */
enum PosyStatus posy_engine_run_record(const struct PosyEngine *engine,
                                       const char *run_id,
                                       char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSY_H */

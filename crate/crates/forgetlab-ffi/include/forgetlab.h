#ifndef FORGETLAB_H
#define FORGETLAB_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes of every C-ABI call.
 */
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  /**
   * Runtime failure (I/O, numeric, malformed data).
   */
  FL_STATUS_RUNTIME_ERROR = 1,
  /**
   * Invalid configuration or arguments.
   */
  FL_STATUS_CONFIG_ERROR = 2,
  /**
   * A required pointer argument was null.
   */
  FL_STATUS_NULL_POINTER = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  FL_STATUS_INVALID_UTF8 = 4,
  /**
   * An output buffer was too small.
   */
  FL_STATUS_BUFFER_TOO_SMALL = 5,
} FlStatus;

/**
 * Opaque model handle.
 */
typedef struct FlModel FlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static string; never free it.
 */
const char *fl_version(void);

/**
 * Message of the last failure on this thread, or null if none occurred.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *fl_last_error_message(void);

/**
 * Release a string produced by this library.
 *
 * # Safety
 * `s` must have been returned by a forgetlab function; passing it twice is
 * undefined behavior. Null is ignored.
 */
void fl_string_free(char *s);

/**
 * Corpus BLEU over newline-separated, whitespace-tokenized sentences.
 * On success `out_report_json` receives a JSON report (bleu, n-gram
 * precisions, brevity penalty, token counts).
 *
 * # Safety
 * `hypotheses` and `references` must be valid NUL-terminated strings;
 * `out_report_json` must be a valid pointer.
 */
enum FlStatus fl_bleu_score(const char *hypotheses, const char *references, char **out_report_json);

/**
 * Load a checkpoint container from disk. Returns null on failure (consult
 * [`fl_last_error_message`]).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct FlModel *fl_model_load(const char *path);

/**
 * Save a model as a checkpoint container.
 *
 * # Safety
 * `model` must be a live handle from this library; `path` a valid string.
 */
enum FlStatus fl_model_save(const struct FlModel *model, const char *path);

/**
 * Total trainable parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t fl_model_param_count(const struct FlModel *model);

/**
 * Model configuration as JSON.
 *
 * # Safety
 * `model` must be a live handle; `out_json` a valid pointer.
 */
enum FlStatus fl_model_config_json(const struct FlModel *model, char **out_json);

/**
 * Greedy-decode one source sentence (token ids, EOS included) into
 * `out_tokens`. `out_len` receives the hypothesis length.
 *
 * # Safety
 * `model` must be a live handle; `src` must point at `src_len` ids;
 * `out_tokens` must hold `out_cap` entries; `out_len` must be valid.
 */
enum FlStatus fl_model_greedy_decode(const struct FlModel *model,
                                     const uint32_t *src,
                                     size_t src_len,
                                     size_t max_len,
                                     uint32_t *out_tokens,
                                     size_t out_cap,
                                     size_t *out_len);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void fl_model_free(struct FlModel *model);

/**
 * Run one experiment subcommand (forgetting|modules|importance|erasure|
 * drift) against a TOML config, mirroring the CLI. On success
 * `out_run_dir` (optional) receives the run directory path.
 *
 * # Safety
 * `command` and `config_path` must be valid strings; `out_run_dir` may be
 * null or a valid pointer.
 */
enum FlStatus fl_run_experiment(const char *command,
                                const char *config_path,
                                uint32_t jobs,
                                bool overwrite,
                                char **out_run_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORGETLAB_H */

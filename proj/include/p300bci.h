/* p300bci — RSVP P300 speller decoding library.
 *
 * C interface to the C++ core. All functions return a p3_status; on any
 * non-zero status p3_last_error() carries a message for the calling
 * thread. Objects are opaque handles released with the matching *_free.
 */
#ifndef P300BCI_H
#define P300BCI_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define P3_API __declspec(dllexport)
#else
#define P3_API __attribute__((visibility("default")))
#endif

/* Status codes. The CLI reuses them verbatim as process exit codes. */
typedef enum p3_status {
  P3_OK = 0,
  P3_ERROR = 1,         /* unclassified failure */
  P3_CONFIG_ERROR = 2,  /* invalid configuration or schema violation */
  P3_DATA_ERROR = 3,    /* missing/corrupt files, bad shapes or labels */
  P3_NUMERIC_ERROR = 4  /* NaN scores, degenerate statistics */
} p3_status;

P3_API const char* p3_version(void);

/* Message describing the last failing call on this thread. Never NULL. */
P3_API const char* p3_last_error(void);

/* Release a string returned through a char** out parameter. */
P3_API void p3_string_free(char* s);

/* ---- configuration ---------------------------------------------------- */

/* Validate `config_json` (NULL means all defaults) for one of the
 * subcommands "gen", "train", "eval", "xsubject", "noise", "saliency",
 * apply `overrides_json` (NULL for none; flat object with keys "seed",
 * "jobs", "models", "fine_tune"), and return the canonical fully
 * populated document. Unknown keys are rejected. */
P3_API p3_status p3_config_render(const char* subcommand,
                                  const char* config_json,
                                  const char* overrides_json,
                                  char** out_json);

/* ---- whole runs (the CLI surface) ------------------------------------- */

/* Execute a subcommand end to end. Artifacts are written under out_dir
 * (created if missing): report.json, tables/*.csv, saliency/*,
 * checkpoints/*, or epoch containers for "gen". *out_summary receives a
 * printable headline table (free with p3_string_free; may be NULL if the
 * summary is not wanted). */
P3_API p3_status p3_run(const char* subcommand, const char* config_json,
                        const char* out_dir, char** out_summary);

/* ---- datasets ---------------------------------------------------------- */

typedef struct p3_dataset p3_dataset; /* preprocessed epochs, per subject */

/* Generate a synthetic dataset (see the "gen" config schema) and
 * preprocess it to epoch form. */
P3_API p3_status p3_dataset_generate(const char* synthetic_config_json,
                                     p3_dataset** out);

/* Open one or more epoch container files (one subject each). */
P3_API p3_status p3_dataset_open(const char* const* container_paths,
                                 size_t n_paths, p3_dataset** out);

/* Write one container per subject into `directory` (created if missing). */
P3_API p3_status p3_dataset_save(const p3_dataset* ds, const char* directory);

/* Counts and shapes as a small JSON document. */
P3_API p3_status p3_dataset_info(const p3_dataset* ds, char** out_json);

P3_API void p3_dataset_free(p3_dataset* ds);

/* ---- scorers ----------------------------------------------------------- */

typedef struct p3_scorer p3_scorer;

/* kind: "lda", "cnn", "lstm_small", "lstm_large", "lstm_cnn_small",
 * "lstm_cnn_large". */
P3_API p3_status p3_scorer_build(const char* kind, uint64_t seed,
                                 p3_scorer** out);

P3_API p3_status p3_scorer_param_count(const p3_scorer* s, uint64_t* out_count);

/* Train on every epoch of `ds`. schedule_json NULL selects the default
 * schedule (30 epochs at 1e-3 then 30 at 1e-5, RMSProp). */
P3_API p3_status p3_scorer_train(p3_scorer* s, const p3_dataset* ds,
                                 const char* schedule_json);

/* Continued training on calibration data (30 epochs at 1e-4). */
P3_API p3_status p3_scorer_fine_tune(p3_scorer* s, const p3_dataset* calibration);

/* Score one epoch: `len` doubles, channel-major (channel index varies
 * slowest). Networks return a probability in (0,1); LDA an affine score. */
P3_API p3_status p3_scorer_score(const p3_scorer* s, const double* epoch,
                                 size_t len, double* out_score);

P3_API p3_status p3_scorer_save(const p3_scorer* s, const char* path);
P3_API p3_status p3_scorer_open(const char* path, p3_scorer** out);
P3_API void p3_scorer_free(p3_scorer* s);

#ifdef __cplusplus
}
#endif

#endif /* P300BCI_H */

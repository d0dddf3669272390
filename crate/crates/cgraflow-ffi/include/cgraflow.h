#ifndef CGRAFLOW_H
#define CGRAFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum CgfStatus {
  CGF_STATUS_OK = 0,
  /**
   * Null pointer, malformed UTF-8/JSON, or undersized buffer.
   */
  CGF_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Model does not map onto the configuration.
   */
  CGF_STATUS_INFEASIBLE = 2,
  /**
   * Engine output differs from the reference.
   */
  CGF_STATUS_MISMATCH = 3,
  CGF_STATUS_INTERNAL = 4,
} CgfStatus;

/**
 * Opaque handle to a compiled program (model + configuration).
 */
typedef struct CgfProgram CgfProgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *cgf_last_error(void);

/**
 * Compile a model document against a configuration. On success `*out` owns
 * a program handle that must be released with `cgf_program_free`.
 *
 * # Safety
 * `model_json` and `config_json` must be NUL-terminated strings; `out` must
 * be a valid pointer.
 */
enum CgfStatus cgf_program_compile(const char *model_json,
                                   const char *config_json,
                                   struct CgfProgram **out);

/**
 * Release a program handle. Null is ignored.
 *
 * # Safety
 * `p` must be null or a pointer returned by `cgf_program_compile`.
 */
void cgf_program_free(struct CgfProgram *p);

/**
 * Number of bundles in the compiled program.
 *
 * # Safety
 * `p` must be a valid program handle.
 */
uintptr_t cgf_program_bundle_count(const struct CgfProgram *p);

/**
 * Total element count of the model input tensor.
 *
 * # Safety
 * `p` must be a valid program handle.
 */
uintptr_t cgf_program_input_len(const struct CgfProgram *p);

/**
 * Program description (bundles, runtime parameters, memory plan) as JSON.
 * Free the returned string with `cgf_string_free`.
 *
 * # Safety
 * `p` must be a valid program handle.
 */
char *cgf_program_export_json(const struct CgfProgram *p);

/**
 * Free a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer produced by this library.
 */
void cgf_string_free(char *s);

/**
 * Run one inference through the cycle-level engine model. `input` holds the
 * input tensor's elements in row-major order; the output tensor is written
 * to `out` (capacity `out_cap` elements) and its length to `out_len`.
 * `cycles`, when non-null, receives the summed engine cycle count.
 *
 * # Safety
 * Pointers must be valid for the stated capacities.
 */
enum CgfStatus cgf_run(const struct CgfProgram *p,
                       const int64_t *input,
                       uintptr_t input_len,
                       int64_t *out,
                       uintptr_t out_cap,
                       uintptr_t *out_len,
                       uint64_t *cycles);

/**
 * Run the engine pipeline and the reference model on a seeded random input
 * and report the largest absolute difference.
 *
 * # Safety
 * `p` must be a valid program handle; `max_diff` may be null.
 */
enum CgfStatus cgf_verify(const struct CgfProgram *p, uint64_t seed, int64_t *max_diff);

/**
 * Analytic sweep over a JSON list of configurations; returns the CSV table.
 * Free with `cgf_string_free`.
 *
 * # Safety
 * Arguments must be NUL-terminated strings.
 */
char *cgf_sweep_csv(const char *model_json, const char *configs_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGRAFLOW_H */

#ifndef NMM_H
#define NMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum NmmStatus {
  NMM_STATUS_OK = 0,
  NMM_STATUS_NULL_POINTER = 1,
  NMM_STATUS_INVALID_ARGUMENT = 2,
  NMM_STATUS_OUT_OF_RANGE = 3,
  NMM_STATUS_BUDGET_EXCEEDED = 4,
  NMM_STATUS_IO = 5,
  NMM_STATUS_FORMAT = 6,
  NMM_STATUS_FINGERPRINT_MISMATCH = 7,
  NMM_STATUS_NUMERIC = 8,
  NMM_STATUS_PANIC = 9,
} NmmStatus;

/**
 * Particle weighting for `nmm_predict_particles`.
 */
typedef enum NmmWeighting {
  NMM_WEIGHTING_UNIFORM = 0,
  NMM_WEIGHTING_IMPORTANCE = 1,
} NmmWeighting;

typedef struct NmmGraph NmmGraph;

typedef struct NmmIsing NmmIsing;

typedef struct NmmParams NmmParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *nmm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nmm_version(void);

/**
 * Undirected graph from `num_edges` pairs stored flat in `edges`
 * (u0, v0, u1, v1, ...).
 *
 * # Safety
 * `edges` must hold `2 * num_edges` values; `out` must be writable.
 */
enum NmmStatus nmm_graph_new(size_t num_nodes,
                             const size_t *edges,
                             size_t num_edges,
                             struct NmmGraph **out);

/**
 * height×width 4-neighbor grid, nodes in row-major order.
 *
 * # Safety
 * `out` must be writable.
 */
enum NmmStatus nmm_graph_grid(size_t height, size_t width, struct NmmGraph **out);

/**
 * Reads a whitespace-separated edge list. `num_nodes` may exceed the
 * largest id to add isolated trailing nodes.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NmmStatus nmm_graph_load(const char *path, size_t num_nodes, struct NmmGraph **out);

/**
 * Attaches row-major `num_nodes × dim` features, replacing any present.
 *
 * # Safety
 * `g` must be a live graph handle; `data` must hold `num_nodes * dim` values.
 */
enum NmmStatus nmm_graph_set_features(struct NmmGraph *g, const double *data, size_t dim);

/**
 * # Safety
 * `g` must be null or a handle from this library not yet freed.
 */
void nmm_graph_free(struct NmmGraph *g);

/**
 * # Safety
 * `g` must be a live graph handle; `out` must be writable.
 */
enum NmmStatus nmm_graph_num_nodes(const struct NmmGraph *g, size_t *out);

/**
 * Size of n(i), which includes i itself.
 *
 * # Safety
 * `g` must be a live graph handle; `out` must be writable.
 */
enum NmmStatus nmm_graph_neighborhood_size(const struct NmmGraph *g, size_t node, size_t *out);

/**
 * Explicit α (N×C) and attention rows.
 *
 * # Safety
 * `alpha` and `attn` must hold `alpha_len` and `attn_len` values; `g` must
 * be a live graph handle; `out` must be writable.
 */
enum NmmStatus nmm_params_new(const struct NmmGraph *g,
                              size_t num_classes,
                              const double *alpha,
                              size_t alpha_len,
                              const double *attn,
                              size_t attn_len,
                              struct NmmParams **out);

/**
 * The same α (length C) at every node and uniform attention.
 *
 * # Safety
 * `alpha` must hold `num_classes` values; `g` must be a live graph handle;
 * `out` must be writable.
 */
enum NmmStatus nmm_params_uniform(const struct NmmGraph *g,
                                  const double *alpha,
                                  size_t num_classes,
                                  struct NmmParams **out);

/**
 * α and attention from a saved model file. Refuses a graph whose
 * fingerprint differs from the one the model was saved with.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `g` must be a live graph handle;
 * `out` must be writable.
 */
enum NmmStatus nmm_params_load_model(const char *path,
                                     const struct NmmGraph *g,
                                     struct NmmParams **out);

/**
 * # Safety
 * `p` must be null or a handle from this library not yet freed.
 */
void nmm_params_free(struct NmmParams *p);

/**
 * # Safety
 * `p` must be a live params handle; `out` must be writable.
 */
enum NmmStatus nmm_params_num_classes(const struct NmmParams *p, size_t *out);

/**
 * ln p(y_τ, c_τ) for nodes τ with labels and chosen neighbors.
 *
 * # Safety
 * `nodes`, `labels` and `choices` must each hold `len` values; handles must
 * be live; `out` must be writable.
 */
enum NmmStatus nmm_log_joint(const struct NmmGraph *g,
                             const struct NmmParams *p,
                             const size_t *nodes,
                             const size_t *labels,
                             const size_t *choices,
                             size_t len,
                             double *out);

/**
 * ln p(y_τ) by enumeration under the default budget.
 *
 * # Safety
 * `nodes` and `labels` must each hold `len` values; handles must be live;
 * `out` must be writable.
 */
enum NmmStatus nmm_exact_marginal(const struct NmmGraph *g,
                                  const struct NmmParams *p,
                                  const size_t *nodes,
                                  const size_t *labels,
                                  size_t len,
                                  double *out);

/**
 * Monte Carlo ELBO of ln p(y_τ) from `samples` draws.
 *
 * # Safety
 * `nodes` and `labels` must each hold `len` values; handles must be live;
 * `elbo` must be writable and `std_error` null or writable.
 */
enum NmmStatus nmm_elbo(const struct NmmGraph *g,
                        const struct NmmParams *p,
                        const size_t *nodes,
                        const size_t *labels,
                        size_t len,
                        size_t samples,
                        uint64_t seed,
                        double *elbo,
                        double *std_error);

/**
 * p(y_target | y_τ) by enumeration, written to `probs` (length C).
 *
 * # Safety
 * `nodes` and `labels` must each hold `len` values; `probs` must hold
 * `num_classes` values; handles must be live.
 */
enum NmmStatus nmm_predict_exact(const struct NmmGraph *g,
                                 const struct NmmParams *p,
                                 const size_t *nodes,
                                 const size_t *labels,
                                 size_t len,
                                 size_t target,
                                 double *probs,
                                 size_t num_classes);

/**
 * Particle estimate of p(y_target | y_τ); `std_error` may be null.
 *
 * # Safety
 * `nodes` and `labels` must each hold `len` values; `probs` and a non-null
 * `std_error` must hold `num_classes` values; handles must be live.
 */
enum NmmStatus nmm_predict_particles(const struct NmmGraph *g,
                                     const struct NmmParams *p,
                                     const size_t *nodes,
                                     const size_t *labels,
                                     size_t len,
                                     size_t target,
                                     size_t particles,
                                     uint64_t seed,
                                     enum NmmWeighting weighting,
                                     double *probs,
                                     double *std_error,
                                     size_t num_classes);

/**
 * Ising grid with uniform coupling `j` and field `h`.
 *
 * # Safety
 * `out` must be writable.
 */
enum NmmStatus nmm_ising_grid(size_t height,
                              size_t width,
                              double j,
                              double h,
                              struct NmmIsing **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void nmm_ising_free(struct NmmIsing *m);

/**
 * Converged mean-field free energy F = KL(q‖p) − ln Z.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum NmmStatus nmm_ising_mean_field(const struct NmmIsing *m, double *out);

/**
 * ln Z by enumeration; small models only.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum NmmStatus nmm_ising_log_partition(const struct NmmIsing *m, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMM_H */

#ifndef RANKJUMP_H
#define RANKJUMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values accepted wherever a `convention` argument is taken.
 */
enum RjConvention
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  /**
   * `W − η(T + λW)`.
   */
  RJ_CONVENTION_HALF_DECAY = 0,
  /**
   * `(1 − 2ηλ)W − ηT`.
   */
  RJ_CONVENTION_FULL_GRADIENT = 1,
  /**
   * `W − η(2T + λW)`.
   */
  RJ_CONVENTION_UNHALVED = 2,
};
#ifndef __cplusplus
typedef uint32_t RjConvention;
#endif // __cplusplus

/**
 * Result codes.
 */
enum RjStatus
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  RJ_STATUS_OK = 0,
  RJ_STATUS_NULL_POINTER = 1,
  RJ_STATUS_SHAPE = 2,
  RJ_STATUS_USAGE = 3,
  RJ_STATUS_NUMERICAL = 4,
  RJ_STATUS_DIVERGENCE = 5,
  RJ_STATUS_UNSUPPORTED_DEPTH = 6,
  RJ_STATUS_NON_CONVERGENCE = 7,
  RJ_STATUS_CONFIG = 8,
  RJ_STATUS_IO = 9,
  RJ_STATUS_SERIALIZE = 10,
  RJ_STATUS_INVALID_UTF8 = 11,
  RJ_STATUS_BUFFER_TOO_SMALL = 12,
  RJ_STATUS_PANIC = 13,
};
#ifndef __cplusplus
typedef uint32_t RjStatus;
#endif // __cplusplus

/**
 * Network weights.
 */
typedef struct RjNetwork RjNetwork;

/**
 * A completion problem.
 */
typedef struct RjProblem RjProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into `buf` and
 * returns the buffer size the full message needs (0 when there is no error).
 * The copy is truncated when `len` is too small.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t rj_last_error_message(char *buf, size_t len);

/**
 * Static description of a status code (`"unknown status"` for other values).
 */
const char *rj_status_name(uint32_t status);

/**
 * The 2×2 problem `[[1, ?], [ε, 1]]`.
 *
 * # Safety
 * `out_problem` must be a valid pointer.
 */
RjStatus rj_problem_two_by_two(double epsilon, struct RjProblem **out_problem);

/**
 * A problem from a row-major `rows × cols` target and `n_observed` observed
 * `(obs_rows[k], obs_cols[k])` positions. Unobserved target entries are held-out truth.
 *
 * # Safety
 * `target` must hold `rows·cols` doubles, `obs_rows`/`obs_cols` `n_observed` entries
 * each, and `out_problem` must be a valid pointer.
 */
RjStatus rj_problem_new(size_t rows,
                        size_t cols,
                        const double *target,
                        const size_t *obs_rows,
                        const size_t *obs_cols,
                        size_t n_observed,
                        struct RjProblem **out_problem);

/**
 * # Safety
 * `problem` must be null or a pointer from an `rj_problem_*` constructor not yet freed.
 */
void rj_problem_free(struct RjProblem *problem);

/**
 * Gaussian initialization with per-layer standard deviation `scale/√fan_in`.
 * `widths` lists `d_in, hidden…, d_out`.
 *
 * # Safety
 * `widths` must hold `n_widths` entries and `out_network` must be a valid pointer.
 */
RjStatus rj_network_gaussian(const size_t *widths,
                             size_t n_widths,
                             double scale,
                             uint64_t seed,
                             struct RjNetwork **out_network);

/**
 * Balanced factorization of the row-major `d_out × d_in` matrix `a`.
 *
 * # Safety
 * `a` must hold `d_out·d_in` doubles (`widths[n_widths−1]·widths[0]`), `widths`
 * `n_widths` entries, and `out_network` must be a valid pointer.
 */
RjStatus rj_network_balanced(const double *a,
                             const size_t *widths,
                             size_t n_widths,
                             struct RjNetwork **out_network);

/**
 * # Safety
 * `network` must be null or a pointer from an `rj_network_*` constructor not yet freed.
 */
void rj_network_free(struct RjNetwork *network);

/**
 * Number of layers.
 *
 * # Safety
 * `network` must be a live handle and `out_depth` a valid pointer.
 */
RjStatus rj_network_depth(const struct RjNetwork *network, size_t *out_depth);

/**
 * Writes the row-major end-to-end product `A_θ` (`d_out × d_in`) into `buf`.
 *
 * # Safety
 * `network` must be a live handle and `buf` must hold `len` doubles.
 */
RjStatus rj_network_product(const struct RjNetwork *network, double *buf, size_t len);

/**
 * `‖θ‖² = Σ‖W_ℓ‖_F²`.
 *
 * # Safety
 * `network` must be a live handle and `out_norm_sq` a valid pointer.
 */
RjStatus rj_network_param_norm_sq(const struct RjNetwork *network, double *out_norm_sq);

/**
 * Training cost `C(A_θ)` and regularized loss `C + λ‖θ‖²`.
 *
 * # Safety
 * Handles must be live; `out_cost` and `out_loss` must be valid pointers.
 */
RjStatus rj_loss(const struct RjNetwork *network,
                 const struct RjProblem *prob,
                 double lambda,
                 double *out_cost,
                 double *out_loss);

/**
 * One SGD step on the observed entry `(i, j)`, in place.
 *
 * # Safety
 * Handles must be live.
 */
RjStatus rj_sgd_step_at(struct RjNetwork *network,
                        const struct RjProblem *prob,
                        double eta,
                        double lambda,
                        uint32_t convention_code,
                        size_t i,
                        size_t j);

/**
 * `steps` SGD steps at constant `(η, λ)` with entries drawn from the stream `seed`,
 * in place. On divergence the network is left unchanged.
 *
 * # Safety
 * Handles must be live.
 */
RjStatus rj_sgd_run(struct RjNetwork *network,
                    const struct RjProblem *prob,
                    double eta,
                    double lambda,
                    uint32_t convention_code,
                    size_t steps,
                    uint64_t seed);

/**
 * One full-batch gradient step on `ℒ_λ`, in place.
 *
 * # Safety
 * Handles must be live.
 */
RjStatus rj_gd_step(struct RjNetwork *network,
                    const struct RjProblem *prob,
                    double eta,
                    double lambda);

/**
 * Membership in the absorbing set with parameters `(r, ε₁, ε₂, α, C)`, with the
 * smallest slack over all clauses (negative when outside).
 *
 * # Safety
 * `network` must be a live handle; `out_member` and `out_margin` valid pointers.
 */
RjStatus rj_membership(const struct RjNetwork *network,
                       size_t r,
                       double eps1,
                       double eps2,
                       double alpha,
                       double cap_c,
                       bool *out_member,
                       double *out_margin);

/**
 * Closure and reachability constants as a JSON object written into `buf`.
 * Pass `NaN` for `alpha`, `eta` or `c0` to use their defaults. `out_needed`
 * (optional) receives the byte count including the terminator; with a short
 * buffer the call returns `BufferTooSmall` and still sets it.
 *
 * # Safety
 * `buf` must be null or hold `len` bytes; `out_needed` must be null or valid.
 */
RjStatus rj_bounds_json(double lambda,
                        size_t depth,
                        double cap_c,
                        double c1,
                        size_t n,
                        size_t n_min,
                        size_t r,
                        double eps1,
                        double eps2,
                        double alpha,
                        double eta,
                        double c0,
                        char *buf,
                        size_t len,
                        size_t *out_needed);

/**
 * Runs a built-in preset (`fig1`…`fig4`) into `out_dir`. `n_seeds < 0` keeps the
 * preset's seeds, otherwise seeds `0..n_seeds` run.
 *
 * # Safety
 * `name` and `out_dir` must be NUL-terminated strings.
 */
RjStatus rj_run_preset(const char *name, const char *out_dir, int64_t n_seeds);

/**
 * Runs the experiment described by the TOML file at `config_path` into `out_dir`.
 *
 * # Safety
 * `config_path` and `out_dir` must be NUL-terminated strings.
 */
RjStatus rj_run_config(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKJUMP_H */

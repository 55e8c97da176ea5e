#pragma once

/**
 * Exponential-tilting update dynamics on model states.
 *
 * One step replaces each conditional q_t(.|u) by the normalized geometric
 * interpolation q_t^(1-lambda) * p~2^lambda, where p~2 is the smoothed target
 * (1-alpha) * p^2 + alpha * reference. lambda = 0 reproduces q_t and
 * lambda = 1 reproduces p~2, both bit-exactly. All prefixes are tilted
 * simultaneously from the frozen Q_t snapshot.
 *
 * StepDiagnostics carries the proof-side quantities of the first-order
 * approximation theorem: the effective step recovered by q_t-least-squares,
 * the log-normalizer psi, and the residual ||s - lambda * r_c|| in the local
 * L2(q_t) norm.
 */

#include <functional>
#include <vector>

#include "tiltlab/token_tree.hpp"

namespace tiltlab {

enum class ReferenceKind { kUniform, kCurrentModel };

constexpr double kDegenerateDirectionVar = 1e-12;  // v_0

struct TiltingSchedule {
  std::vector<double> lambdas;  // per-step weights, each in [0, 1]
  double alpha = 0.01;
  ReferenceKind reference = ReferenceKind::kUniform;

  std::int32_t steps() const { return static_cast<std::int32_t>(lambdas.size()); }
  double lambda_sum() const;     // Lambda_T
  double lambda_sq_sum() const;  // S_T
  void validate() const;

  static TiltingSchedule equal_steps(std::int32_t t, double lambda, double alpha = 0.01,
                                     ReferenceKind reference = ReferenceKind::kUniform);
};

struct StepDiagnostics {
  std::vector<double> effective_step;  // lambda_{t,u}; applied value where degenerate
  std::vector<double> log_normalizer;  // psi_{t,u} at the applied step
  std::vector<double> residual_norm;   // ||s - lambda_{t,u} r_c||_{t,u}
  double step_kl = 0.0;                // eps_t = KL(Q_t || Q_{t+1}) over paths
};

// (1-alpha) * p^2 + alpha * reference, entrywise; exact where p^2 equals the
// reference. Throws AlphaOutOfRange unless alpha in (0,1).
ModelState smooth_target(const TokenTree& p_hat2, const ModelState& q_t, double alpha,
                         ReferenceKind rho);

// Per-prefix exponential tilting with a single step weight.
ModelState tilt(const ModelState& q_t, const ModelState& p_tilde2, double lambda);

// Per-prefix tilting with one weight per prefix (the modulated update).
ModelState tilt_per_prefix(const ModelState& q_t, const ModelState& p_tilde2,
                           std::span<const double> lambdas);

// psi_{t,u}(lambda) = log sum_a q^(1-lambda) p~^lambda at one prefix.
double log_normalizer(const ModelState& q_t, const ModelState& p_tilde2, double lambda,
                      std::int64_t prefix_rank);

// Forward KL(Q_t || Q_next) over path distributions.
double measure_step_kl(const ModelState& q_t, const ModelState& q_next);

// lambda_{t,u} = E_{q_t}[s r_c] / E_{q_t}[r_c^2]; DegenerateDirection when
// Var_{q_t}(r) < v0.
double effective_step(const ModelState& q_t, const ModelState& q_next,
                      const ModelState& p_tilde2, std::int64_t prefix_rank,
                      double v0 = kDegenerateDirectionVar);

// ||s - lambda r_c||_{t,u} for a given lambda.
double tilt_residual_norm(const ModelState& q_t, const ModelState& q_next,
                          const ModelState& p_tilde2, std::int64_t prefix_rank,
                          double lambda);

// Applies an arbitrary per-prefix log-space shift and renormalizes; the
// bounds verifier uses this to build non-tilt "true updates".
ModelState apply_log_shift(const ModelState& q, std::span<const double> shift_rows);

// Per-prefix weight function w(u) in [0, 1]; empty = unmodulated.
using StepModulator =
    std::function<std::vector<double>(const ModelState& q_t, const ModelState& p_tilde2)>;

struct ScheduleRun {
  std::vector<ModelState> states;            // Q_0 .. Q_T
  std::vector<StepDiagnostics> diagnostics;  // one per step
};

ScheduleRun run_schedule(const ModelState& q0, const TokenTree& p_hat2,
                         const TiltingSchedule& schedule,
                         const StepModulator& modulator = {});

}  // namespace tiltlab

#pragma once

/**
 * Token-adaptive loss reweighting.
 *
 * Weights minimize sum_i w_i * l_i + tau * sum_i w_i log w_i over the simplex;
 * the closed form is w_i = exp(-l_i / tau) / Z, equivalently w_i ~ p_i^(1/tau).
 * The unnormalized form drops Z. solve_weights_oracle solves the same program
 * by entropic mirror descent and is the independent check of the closed form.
 * tau is either fixed or the median of per-sequence mean losses in a batch,
 * clamped below at kTauMin; weights are clipped below at the configured floor
 * and treated as constants by talr_loss (the stop-gradient analog).
 */

#include <optional>
#include <span>
#include <vector>

#include "tiltlab/tilting.hpp"
#include "tiltlab/token_tree.hpp"

namespace tiltlab {

constexpr double kTauMin = 1e-3;
constexpr double kDefaultWeightFloor = 0.01;

enum class WeightMode { kSimplex, kUnnormalized };

struct TalrConfig {
  std::optional<double> tau;  // fixed temperature; nullopt = dynamic-median
  double weight_floor = kDefaultWeightFloor;
  WeightMode mode = WeightMode::kUnnormalized;

  void validate() const;
};

struct TokenLossBatch {
  std::vector<std::vector<double>> sequences;  // token NLLs in nats, per sequence

  std::size_t token_count() const;  // N
  std::vector<double> sequence_means() const;
  void validate() const;
};

std::vector<double> solve_weights_closed_form(std::span<const double> losses, double tau,
                                              WeightMode mode);

// Eq-(1) objective value: sum w*l + tau * sum w log w (0 log 0 = 0).
double talr_objective(std::span<const double> losses, std::span<const double> weights,
                      double tau);

struct OracleSolution {
  std::vector<double> weights;
  double objective = 0.0;
  int iterations = 0;
};

// Entropic mirror descent on the simplex (step 0.1, 1e4 iteration cap).
// Throws ConvergenceFailure with the best objective gap on cap overrun.
OracleSolution solve_weights_oracle(std::span<const double> losses, double tau);

// Median of per-sequence mean losses (even count: midpoint of the two central
// values), clamped at kTauMin.
double select_tau(const TokenLossBatch& batch);

std::vector<double> apply_floor(std::vector<double> weights, double w_min);

struct TalrLossResult {
  double loss = 0.0;
  std::vector<double> weights;  // per token, flattened in sequence order
  double tau_effective = 0.0;
};

// Algorithm-1 loss: (1/N) sum_t w_t * l_t with w_t = max(exp(-l_t/tau), floor).
TalrLossResult talr_loss(const TokenLossBatch& batch, const TalrConfig& cfg);

// Per-prefix modulator weight: w(u) = floor-clipped (E_{a~p~2(.|u)}[q_t(a|u)])^(1/tau).
// Dynamic tau comes from the per-path mean losses of p~2's enumerated paths.
std::vector<double> talr_modulator_weights(const ModelState& q_t, const ModelState& p_tilde2,
                                           const TalrConfig& cfg);

// Adapter for run_schedule.
StepModulator make_talr_modulator(TalrConfig cfg);

}  // namespace tiltlab

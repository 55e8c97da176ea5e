#include "tiltlab/talr.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tiltlab {

namespace {

constexpr double kOracleStep = 0.1;
constexpr int kOracleIterationCap = 10000;
constexpr double kOracleObjectiveTol = 1e-12;
constexpr double kOracleCoordTol = 1e-9;

void validate_losses(std::span<const double> losses) {
  if (losses.empty()) fail(ErrorCode::EmptyBatch, "no losses given");
  for (double l : losses) {
    if (std::isnan(l)) fail(ErrorCode::NanInput, "NaN loss");
    if (!std::isfinite(l) || l < 0.0)
      fail(ErrorCode::NanInput, "losses must be finite and nonnegative");
  }
}

}  // namespace

void TalrConfig::validate() const {
  if (tau && !(*tau > 0.0)) fail(ErrorCode::NonpositiveTau, "fixed tau must be positive");
  if (!(weight_floor >= 0.0 && weight_floor < 1.0))
    fail(ErrorCode::InvalidConfig, "weight floor outside [0, 1)");
}

std::size_t TokenLossBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& seq : sequences) n += seq.size();
  return n;
}

std::vector<double> TokenLossBatch::sequence_means() const {
  std::vector<double> means;
  means.reserve(sequences.size());
  for (const auto& seq : sequences) {
    double sum = 0.0;
    for (double l : seq) sum += l;
    means.push_back(sum / static_cast<double>(seq.size()));
  }
  return means;
}

void TokenLossBatch::validate() const {
  if (sequences.empty()) fail(ErrorCode::EmptyBatch, "batch has no sequences");
  for (const auto& seq : sequences) {
    if (seq.empty()) fail(ErrorCode::EmptyBatch, "batch contains an empty sequence");
    validate_losses(seq);
  }
}

std::vector<double> solve_weights_closed_form(std::span<const double> losses, double tau,
                                              WeightMode mode) {
  if (!(tau > 0.0)) fail(ErrorCode::NonpositiveTau, "tau must be positive");
  validate_losses(losses);
  std::vector<double> w(losses.size());
  if (mode == WeightMode::kUnnormalized) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(-losses[i] / tau);
    return w;
  }
  const double lo = *std::min_element(losses.begin(), losses.end());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(-(losses[i] - lo) / tau);
    z += w[i];
  }
  for (double& v : w) v /= z;
  return w;
}

double talr_objective(std::span<const double> losses, std::span<const double> weights,
                      double tau) {
  double obj = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    obj += weights[i] * losses[i];
    if (weights[i] > 0.0) obj += tau * weights[i] * std::log(weights[i]);
  }
  return obj;
}

OracleSolution solve_weights_oracle(std::span<const double> losses, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::NonpositiveTau, "tau must be positive");
  validate_losses(losses);
  const std::size_t n = losses.size();

  // Mirror descent in log coordinates: log w <- log w - eta * (l + tau(1 + log w)),
  // then renormalize via logsumexp.
  std::vector<double> logw(n, -std::log(static_cast<double>(n)));
  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  double prev_obj = talr_objective(losses, w, tau);
  for (int it = 1; it <= kOracleIterationCap; ++it) {
    double hi = -HUGE_VAL;
    for (std::size_t i = 0; i < n; ++i) {
      logw[i] -= kOracleStep * (losses[i] + tau * (1.0 + logw[i]));
      hi = std::max(hi, logw[i]);
    }
    double z = 0.0;
    for (double v : logw) z += std::exp(v - hi);
    const double log_z = hi + std::log(z);
    double max_delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      logw[i] -= log_z;
      const double wi = std::exp(logw[i]);
      max_delta = std::max(max_delta, std::fabs(wi - w[i]));
      w[i] = wi;
    }
    const double obj = talr_objective(losses, w, tau);
    if (std::fabs(prev_obj - obj) < kOracleObjectiveTol && max_delta < kOracleCoordTol) {
      return {std::move(w), obj, it};
    }
    prev_obj = obj;
  }
  const auto closed = solve_weights_closed_form(losses, tau, WeightMode::kSimplex);
  const double gap = prev_obj - talr_objective(losses, closed, tau);
  fail(ErrorCode::ConvergenceFailure,
       "oracle hit the iteration cap; best objective gap " + std::to_string(gap));
}

double select_tau(const TokenLossBatch& batch) {
  batch.validate();
  std::vector<double> means = batch.sequence_means();
  std::sort(means.begin(), means.end());
  const std::size_t n = means.size();
  const double median =
      (n % 2 == 1) ? means[n / 2] : 0.5 * (means[n / 2 - 1] + means[n / 2]);
  return std::max(median, kTauMin);
}

std::vector<double> apply_floor(std::vector<double> weights, double w_min) {
  for (double& w : weights) w = std::max(w, w_min);
  return weights;
}

TalrLossResult talr_loss(const TokenLossBatch& batch, const TalrConfig& cfg) {
  cfg.validate();
  batch.validate();
  TalrLossResult out;
  out.tau_effective = cfg.tau ? *cfg.tau : select_tau(batch);
  out.weights.reserve(batch.token_count());
  double acc = 0.0;
  for (const auto& seq : batch.sequences) {
    for (double l : seq) {
      const double w = std::max(std::exp(-l / out.tau_effective), cfg.weight_floor);
      out.weights.push_back(w);
      acc += w * l;
    }
  }
  out.loss = acc / static_cast<double>(batch.token_count());
  return out;
}

namespace {

// Per-path token NLLs of q_t along the paths of p~2's tree, the simulator's
// "batch" for dynamic tau.
TokenLossBatch path_loss_batch(const ModelState& q_t, const ModelState& p_tilde2) {
  TokenLossBatch batch;
  const auto paths = enumerate_paths(p_tilde2);
  batch.sequences.reserve(paths.size());
  const TreeShape shape = q_t.shape();
  for (const auto& path : paths) {
    std::vector<double> losses;
    losses.reserve(path.tokens.size() + 1);
    std::int64_t rank = 0;
    for (std::size_t i = 0; i < path.tokens.size(); ++i) {
      losses.push_back(-std::log(q_t.entry(rank, path.tokens[i])));
      if (i + 1 < static_cast<std::size_t>(shape.depth))
        rank = shape.child_rank(rank, static_cast<std::int32_t>(i), path.tokens[i]);
    }
    if (std::cmp_less(path.tokens.size(), shape.depth))
      losses.push_back(-std::log(q_t.entry(rank, shape.vocab)));
    batch.sequences.push_back(std::move(losses));
  }
  return batch;
}

}  // namespace

std::vector<double> talr_modulator_weights(const ModelState& q_t, const ModelState& p_tilde2,
                                           const TalrConfig& cfg) {
  cfg.validate();
  require_same_shape(q_t.shape(), p_tilde2.shape());
  const double tau =
      cfg.tau ? std::max(*cfg.tau, kTauMin) : select_tau(path_loss_batch(q_t, p_tilde2));
  const std::int64_t n = q_t.prefix_count();
  std::vector<double> weights(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const auto q = q_t.row(r);
    const auto p = p_tilde2.row(r);
    double expected = 0.0;
    for (std::size_t a = 0; a < q.size(); ++a) expected += p[a] * q[a];
    weights[static_cast<std::size_t>(r)] =
        std::max(std::pow(expected, 1.0 / tau), cfg.weight_floor);
  }
  return weights;
}

StepModulator make_talr_modulator(TalrConfig cfg) {
  cfg.validate();
  return [cfg](const ModelState& q_t, const ModelState& p_tilde2) {
    return talr_modulator_weights(q_t, p_tilde2, cfg);
  };
}

}  // namespace tiltlab

#pragma once

/**
 * Seeded construction of (P1, P2, Q0) triples with a sparse hard-token shift.
 *
 * Q0 is a log-space perturbation of a random P1 with KL(P1||Q0) <= kappa_init.
 * Each prefix gets a hard set of at least two low-mass children; p^2 is built
 * from q0 by log offsets that are mass-preserving within the hard group and
 * within the easy group separately, so the per-prefix normalizer is 1 and
 * f = log p^2 - log q0 equals the applied offset. Offsets are capped so that
 * measured |f| <= M_h on the hard set and <= M_l + (beta+gamma) M_h off it;
 * leakage adds an off-set perturbation with L2(q0) norm (beta+gamma) times
 * the hard-direction norm. The global hard fraction E[s/m] is calibrated to
 * the requested mass by exact single-edge toggles.
 */

#include <cstdint>
#include <string>
#include <vector>

#include "tiltlab/token_tree.hpp"

namespace tiltlab {

struct SparseShiftScenario {
  double w_s = 0.1;    // hard-set mass target
  double m_h = 1.2;    // max |f| on the hard set (nats)
  double m_l = 0.02;   // max |f| off the hard set before leakage
  double beta = 0.0;   // realizability leakage
  double gamma = 0.0;
  double s = 0.0;      // expected hard tokens per example; 0 = use w_s
  double m = 0.0;      // target expected supervised positions; 0 = natural
  std::int32_t vocab = 3;
  std::int32_t depth = 3;
  std::uint64_t seed = 1;
  double kappa_init = 0.01;  // KL(P1||Q0) budget, "models D1 well"

  // Fraction of prefixes carrying the hard shift; the rest stay within the
  // easy magnitude everywhere (hard tokens cluster, as in real traces).
  double hard_prefix_fraction = 0.35;

  double effective_m_e() const { return m_l + (beta + gamma) * m_h; }
  void validate() const;
};

struct HardSetEntry {
  std::int64_t prefix_rank = 0;
  std::int32_t token = 0;  // == vocab means the EOS child

  auto operator<=>(const HardSetEntry&) const = default;
};

struct GeneratedScenario {
  SparseShiftScenario params;
  TokenTree p1;
  TokenTree p2;
  ModelState q0;
  std::vector<HardSetEntry> hard_set;  // sorted by (prefix, token)

  // Exact post-construction measurements.
  double measured_max_f_hard = 0.0;  // sup |f| on S
  double measured_max_f_easy = 0.0;  // sup |f| off S
  double measured_w_s = 0.0;         // E[s/m] w.r.t. the designated S, under P2
  double measured_kl_p1_q0 = 0.0;

  bool in_hard_set(std::int64_t prefix_rank, std::int32_t token) const;
};

GeneratedScenario generate(const SparseShiftScenario& params);

// Rebuilds a scenario from serialized parts, recomputing all measured fields.
GeneratedScenario assemble_scenario(const SparseShiftScenario& params, TokenTree p1,
                                    TokenTree p2, ModelState q0,
                                    std::vector<HardSetEntry> hard_set);

struct HardStats {
  double s_measured = 0.0;   // expected hard positions per example
  double m_mean = 0.0;       // expected supervised positions per example
  double w_s_measured = 0.0;  // E[s/m]
};

// Threshold-based hardness: a position is hard when the model's probability
// of the target symbol is below p_hard. Expectations are over data's paths.
HardStats measure_hard_stats(const TokenTree& data, const ModelState& model, double p_hard);
HardStats measure_hard_stats(const GeneratedScenario& scenario, double p_hard);

// Sidecar format: one "prefix:token" per line, prefix "root" or "0,2,1".
std::string hard_set_to_text(const TreeShape& shape, std::span<const HardSetEntry> hard_set);
std::vector<HardSetEntry> hard_set_from_text(const TreeShape& shape, const std::string& text);

}  // namespace tiltlab

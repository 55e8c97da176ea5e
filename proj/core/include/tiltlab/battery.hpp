#pragma once

/**
 * The lemma/theorem verification battery behind `verify-all`.
 *
 * Each check runs a fixed, seeded set of instances and reports the instance
 * count, failure count and worst margin (positive = slack). Selectors:
 * kl-identity, first-order, variance, one-step, multi-step, fixed-target,
 * safe-range, talr, coder, or all.
 */

#include <string>
#include <vector>

#include "tiltlab/bounds.hpp"
#include "tiltlab/rng.hpp"
#include "tiltlab/scenario.hpp"

namespace tiltlab {

struct CheckResult {
  std::string name;
  long instances = 0;
  long failures = 0;
  double worst_margin = 0.0;
};

// Random instances for property checks. Trees may carry zero-probability
// entries when allow_zeros is set; models are strictly positive.
TokenTree random_tree(CounterRng& rng, std::int32_t vocab, std::int32_t depth,
                      bool allow_zeros = false);
ModelState random_model(CounterRng& rng, std::int32_t vocab, std::int32_t depth);

// The scenario family every bound check and constant estimate runs on.
SparseShiftScenario default_family(std::uint64_t seed);

CheckResult battery_kl_identity(std::uint64_t seed);
CheckResult battery_first_order(std::uint64_t seed);
CheckResult battery_variance(std::uint64_t seed);
CheckResult battery_one_step(std::uint64_t seed);
CheckResult battery_multi_step(std::uint64_t seed);
CheckResult battery_fixed_target(std::uint64_t seed);
CheckResult battery_safe_range(std::uint64_t seed);
CheckResult battery_talr(std::uint64_t seed);
CheckResult battery_coder(std::uint64_t seed);

// Unknown selector -> InvalidConfig.
std::vector<CheckResult> run_battery(const std::string& selector, std::uint64_t seed);

}  // namespace tiltlab

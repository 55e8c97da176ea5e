#pragma once

/**
 * Experiment configuration: JSON text with a strict schema. Unknown keys are
 * rejected so sweep-grid typos cannot silently produce empty experiments. A
 * parsed config re-emits byte-identically (parse -> emit -> parse is the
 * identity on the structure).
 */

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tiltlab/scenario.hpp"
#include "tiltlab/talr.hpp"
#include "tiltlab/tilting.hpp"

namespace tiltlab {

struct ExperimentConfig {
  SparseShiftScenario scenario;

  // schedule
  std::int32_t steps = 5;
  std::optional<double> lambda_scalar = 0.1;  // equal steps; exclusive with lambdas
  std::vector<double> lambdas;
  double alpha = 0.01;
  ReferenceKind reference = ReferenceKind::kUniform;
  bool talr_modulator = false;
  TalrConfig talr;

  // harness
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::int64_t budget = 0;  // 0 = TILTLAB_BUDGET or default
  std::vector<double> sweep_lambdas = {0.01, 0.05, 0.1, 0.2};
  std::vector<std::int32_t> sweep_steps = {1, 5, 20};

  TiltingSchedule schedule() const;
  void validate() const;

  std::string to_json_text() const;
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
};

}  // namespace tiltlab

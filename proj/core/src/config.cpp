#include "tiltlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tiltlab {

namespace {

using Json = nlohmann::ordered_json;

void reject_unknown(const Json& obj, const char* where, const std::set<std::string>& known) {
  for (const auto& [key, value] : obj.items()) {
    if (!known.contains(key))
      fail(ErrorCode::InvalidConfig, std::string("unknown key '") + key + "' in " + where);
  }
}

double require_number(const Json& obj, const char* where, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number())
    fail(ErrorCode::InvalidConfig, std::string(where) + "." + key + " must be a number");
  return obj[key].get<double>();
}

}  // namespace

TiltingSchedule ExperimentConfig::schedule() const {
  TiltingSchedule s;
  if (!lambdas.empty()) {
    s.lambdas = lambdas;
  } else if (lambda_scalar) {
    s.lambdas.assign(static_cast<std::size_t>(steps), *lambda_scalar);
  } else {
    fail(ErrorCode::InvalidConfig, "schedule needs 'lambda' or 'lambdas'");
  }
  s.alpha = alpha;
  s.reference = reference;
  s.validate();
  return s;
}

void ExperimentConfig::validate() const {
  scenario.validate();
  if (steps < 1) fail(ErrorCode::InvalidConfig, "schedule.T must be positive");
  if (lambda_scalar && !lambdas.empty())
    fail(ErrorCode::InvalidConfig, "give schedule.lambda or schedule.lambdas, not both");
  if (!lambdas.empty() && std::cmp_not_equal(lambdas.size(), steps))
    fail(ErrorCode::InvalidConfig, "schedule.lambdas length must equal T");
  schedule();  // range checks
  talr.validate();
  if (budget < 0) fail(ErrorCode::InvalidConfig, "budget must be nonnegative");
  for (double l : sweep_lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) fail(ErrorCode::InvalidConfig, "sweep lambda outside [0, 1]");
  }
  for (std::int32_t t : sweep_steps) {
    if (t < 1) fail(ErrorCode::InvalidConfig, "sweep T must be positive");
  }
}

std::string ExperimentConfig::to_json_text() const {
  Json j;
  j["scenario"] = {
      {"vocab", scenario.vocab}, {"depth", scenario.depth},   {"w_S", scenario.w_s},
      {"M_h", scenario.m_h},     {"M_l", scenario.m_l},       {"beta", scenario.beta},
      {"gamma", scenario.gamma}, {"s", scenario.s},           {"m", scenario.m},
      {"seed", scenario.seed},   {"kappa_init", scenario.kappa_init},
  };
  Json sched;
  sched["T"] = steps;
  if (!lambdas.empty()) {
    sched["lambdas"] = lambdas;
  } else if (lambda_scalar) {
    sched["lambda"] = *lambda_scalar;
  }
  sched["alpha"] = alpha;
  sched["reference"] = reference == ReferenceKind::kUniform ? "uniform" : "model";
  sched["modulator"] = talr_modulator ? "talr" : "none";
  j["schedule"] = sched;
  Json talr_j;
  if (talr.tau) {
    talr_j["tau"] = *talr.tau;
  } else {
    talr_j["tau"] = "median";
  }
  talr_j["floor"] = talr.weight_floor;
  j["talr"] = talr_j;
  j["sweep"] = {{"lambdas", sweep_lambdas}, {"T", sweep_steps}};
  j["seed"] = seed;
  j["out"] = out_dir;
  j["budget"] = budget;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, "config root must be an object");
  reject_unknown(j, "config", {"scenario", "schedule", "talr", "sweep", "seed", "out", "budget"});

  ExperimentConfig cfg;
  cfg.lambda_scalar.reset();
  if (j.contains("scenario")) {
    const Json& s = j["scenario"];
    reject_unknown(s, "scenario",
                   {"vocab", "depth", "w_S", "M_h", "M_l", "beta", "gamma", "s", "m", "seed",
                    "kappa_init"});
    cfg.scenario.vocab = static_cast<std::int32_t>(require_number(s, "scenario", "vocab", 3));
    cfg.scenario.depth = static_cast<std::int32_t>(require_number(s, "scenario", "depth", 3));
    cfg.scenario.w_s = require_number(s, "scenario", "w_S", 0.1);
    cfg.scenario.m_h = require_number(s, "scenario", "M_h", 1.2);
    cfg.scenario.m_l = require_number(s, "scenario", "M_l", 0.02);
    cfg.scenario.beta = require_number(s, "scenario", "beta", 0.0);
    cfg.scenario.gamma = require_number(s, "scenario", "gamma", 0.0);
    cfg.scenario.s = require_number(s, "scenario", "s", 0.0);
    cfg.scenario.m = require_number(s, "scenario", "m", 0.0);
    cfg.scenario.seed = static_cast<std::uint64_t>(require_number(s, "scenario", "seed", 1));
    cfg.scenario.kappa_init = require_number(s, "scenario", "kappa_init", 0.01);
  }
  if (j.contains("schedule")) {
    const Json& s = j["schedule"];
    reject_unknown(s, "schedule", {"T", "lambda", "lambdas", "alpha", "reference", "modulator"});
    cfg.steps = static_cast<std::int32_t>(require_number(s, "schedule", "T", 5));
    if (s.contains("lambda") && s.contains("lambdas"))
      fail(ErrorCode::InvalidConfig, "schedule has both lambda and lambdas");
    if (s.contains("lambda")) cfg.lambda_scalar = require_number(s, "schedule", "lambda", 0.1);
    if (s.contains("lambdas")) {
      if (!s["lambdas"].is_array())
        fail(ErrorCode::InvalidConfig, "schedule.lambdas must be an array");
      for (const auto& v : s["lambdas"]) cfg.lambdas.push_back(v.get<double>());
    }
    cfg.alpha = require_number(s, "schedule", "alpha", 0.01);
    if (s.contains("reference")) {
      const std::string r = s["reference"].get<std::string>();
      if (r == "uniform") {
        cfg.reference = ReferenceKind::kUniform;
      } else if (r == "model") {
        cfg.reference = ReferenceKind::kCurrentModel;
      } else {
        fail(ErrorCode::InvalidConfig, "schedule.reference must be 'uniform' or 'model'");
      }
    }
    if (s.contains("modulator")) {
      const std::string m = s["modulator"].get<std::string>();
      if (m == "none") {
        cfg.talr_modulator = false;
      } else if (m == "talr") {
        cfg.talr_modulator = true;
      } else {
        fail(ErrorCode::InvalidConfig, "schedule.modulator must be 'none' or 'talr'");
      }
    }
  }
  if (!cfg.lambda_scalar && cfg.lambdas.empty()) cfg.lambda_scalar = 0.1;
  if (j.contains("talr")) {
    const Json& s = j["talr"];
    reject_unknown(s, "talr", {"tau", "floor"});
    if (s.contains("tau")) {
      if (s["tau"].is_string()) {
        if (s["tau"].get<std::string>() != "median")
          fail(ErrorCode::InvalidConfig, "talr.tau must be a number or 'median'");
        cfg.talr.tau.reset();
      } else if (s["tau"].is_number()) {
        cfg.talr.tau = s["tau"].get<double>();
      } else {
        fail(ErrorCode::InvalidConfig, "talr.tau must be a number or 'median'");
      }
    }
    cfg.talr.weight_floor = require_number(s, "talr", "floor", kDefaultWeightFloor);
  }
  if (j.contains("sweep")) {
    const Json& s = j["sweep"];
    reject_unknown(s, "sweep", {"lambdas", "T"});
    if (s.contains("lambdas")) {
      cfg.sweep_lambdas.clear();
      for (const auto& v : s["lambdas"]) cfg.sweep_lambdas.push_back(v.get<double>());
    }
    if (s.contains("T")) {
      cfg.sweep_steps.clear();
      for (const auto& v : s["T"]) cfg.sweep_steps.push_back(v.get<std::int32_t>());
    }
  }
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("out")) cfg.out_dir = j["out"].get<std::string>();
  if (j.contains("budget")) cfg.budget = j["budget"].get<std::int64_t>();
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

}  // namespace tiltlab

// tiltlab command-line harness: seeded simulation runs, frontier sweeps,
// bound verification, TALR weight solving, and response coding.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "tiltlab/battery.hpp"
#include "tiltlab/bounds.hpp"
#include "tiltlab/config.hpp"
#include "tiltlab/range_coder.hpp"
#include "tiltlab/report.hpp"

namespace fs = std::filesystem;
using namespace tiltlab;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int jobs = 1;
};

ExperimentConfig load_config(const GlobalOptions& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) cfg = ExperimentConfig::from_file(opts.config_path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.scenario.seed = *opts.seed;
  }
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  cfg.validate();
  if (cfg.budget > 0) setenv("TILTLAB_BUDGET", std::to_string(cfg.budget).c_str(), 1);
  return cfg;
}

BoundConstants constants_for(const SparseShiftScenario& params) {
  std::vector<GeneratedScenario> family;
  family.reserve(13);
  for (int i = 0; i < 13; ++i) {
    SparseShiftScenario p = params;
    p.seed = params.seed + 1000 + i;
    family.push_back(generate(p));
  }
  const std::vector<double> grid = {0.005, 0.01, 0.02, 0.05, 0.1, 0.18, 0.25};
  return estimate_constants(family, grid, 0.01);
}

std::string frontier_csv(const std::vector<FrontierCell>& cells) {
  CsvTable csv({"lambda", "T", "modulator", "domain_gain", "general_change", "mean_step_kl",
                "pareto", "status"});
  for (const auto& c : cells) {
    csv.add_row({format_g17(c.lambda), std::to_string(c.steps), c.talr ? "talr" : "none",
                 format_g17(c.domain_gain), format_g17(c.general_change),
                 format_g17(c.mean_step_kl), c.pareto ? "1" : "0", c.status});
  }
  return csv.str();
}

std::string report_csv(const BoundReport& report, const VarianceCheck& variance) {
  CsvTable csv({"name", "measured", "bound", "margin", "pass"});
  for (const auto& c : report.checks) {
    const std::string name = c.degenerate ? c.name + "_degenerate" : c.name;
    csv.add_row({name, format_g17(c.measured), format_g17(c.bound), format_g17(c.margin),
                 c.pass ? "1" : "0"});
  }
  csv.add_row({"variance_prefix_worst", format_g17(variance.max_prefix_var),
               format_g17(variance.max_prefix_var + variance.worst_prefix_margin),
               format_g17(variance.worst_prefix_margin),
               variance.worst_prefix_margin >= kBoundMarginTol ? "1" : "0"});
  csv.add_row({"variance_aggregate", format_g17(variance.aggregate_var),
               format_g17(variance.aggregate_var + variance.aggregate_margin),
               format_g17(variance.aggregate_margin),
               variance.aggregate_margin >= kBoundMarginTol ? "1" : "0"});
  return csv.str();
}

bool report_all_pass(const BoundReport& report, const VarianceCheck& variance) {
  return report.all_pass() && variance.worst_prefix_margin >= kBoundMarginTol &&
         variance.aggregate_margin >= kBoundMarginTol;
}

int cmd_simulate(const GlobalOptions& opts) {
  const ExperimentConfig cfg = load_config(opts);
  const GeneratedScenario scenario = generate(cfg.scenario);
  const TiltingSchedule sched = cfg.schedule();
  const StepModulator modulator =
      cfg.talr_modulator ? make_talr_modulator(cfg.talr) : StepModulator{};
  const ScheduleRun run = run_schedule(scenario.q0, scenario.p2, sched, modulator);

  fs::create_directories(cfg.out_dir);

  CsvTable traj({"t", "lambda_t", "eps_t", "kl_qt_p2", "chi2_p1_qt", "delta_l_p1_cum",
                 "delta_l_p2_cum"});
  const auto p1v = scenario.p1.terminal_masses();
  const auto p2v = scenario.p2.terminal_masses();
  const auto q0v = run.states.front().terminal_masses();
  const double kl_p1_q0 = divergence(Divergence::kKl, p1v, q0v);
  const double kl_p2_q0 = divergence(Divergence::kKl, p2v, q0v);
  for (std::size_t t = 0; t < run.states.size(); ++t) {
    const auto qv = run.states[t].terminal_masses();
    const double lambda_t = t == 0 ? 0.0 : sched.lambdas[t - 1];
    const double eps_t = t == 0 ? 0.0 : run.diagnostics[t - 1].step_kl;
    traj.add_row({std::to_string(t), format_g17(lambda_t), format_g17(eps_t),
                  format_g17(kl_paths(run.states[t], scenario.p2)),
                  format_g17(divergence(Divergence::kChiSquare, p1v, qv)),
                  format_g17(divergence(Divergence::kKl, p1v, qv) - kl_p1_q0),
                  format_g17(divergence(Divergence::kKl, p2v, qv) - kl_p2_q0)});
  }
  write_file_atomic(cfg.out_dir + "/trajectory.csv", traj.str());

  const BoundConstants constants = constants_for(cfg.scenario);
  const BoundReport report =
      verify_multi_step(run, scenario, sched, constants, cfg.talr_modulator);
  const ModelState tilde0 =
      smooth_target(scenario.p2, scenario.q0, sched.alpha, sched.reference);
  const VarianceCheck variance = verify_variance_bound(scenario, scenario.q0, tilde0);
  write_file_atomic(cfg.out_dir + "/report.csv", report_csv(report, variance));

  const RunSummary summary = summarize_run(scenario, run);
  std::vector<FrontierCell> row(1);
  row[0].lambda = sched.lambdas.empty() ? 0.0 : sched.lambdas[0];
  row[0].steps = sched.steps();
  row[0].talr = cfg.talr_modulator;
  row[0].domain_gain = summary.domain_gain;
  row[0].general_change = summary.general_change;
  row[0].mean_step_kl = summary.mean_step_kl;
  mark_pareto(row);
  write_file_atomic(cfg.out_dir + "/summary.csv", frontier_csv(row));

  write_file_atomic(cfg.out_dir + "/config.json", cfg.to_json_text());
  std::cout << cfg.out_dir << "\n";
  return report_all_pass(report, variance) ? 0 : 1;
}

int cmd_sweep(const GlobalOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  const GeneratedScenario scenario = generate(cfg.scenario);

  std::vector<double> lambdas = cfg.sweep_lambdas;
  std::vector<std::int32_t> t_grid = cfg.sweep_steps;
  std::sort(lambdas.begin(), lambdas.end());
  std::sort(t_grid.begin(), t_grid.end());

  struct CellSpec {
    double lambda;
    std::int32_t steps;
    bool talr;
  };
  std::vector<CellSpec> specs;
  for (double l : lambdas) {
    for (std::int32_t t : t_grid) {
      specs.push_back({l, t, false});
      specs.push_back({l, t, true});
    }
  }

  std::vector<FrontierCell> cells(specs.size());
  const int jobs = std::max(1, opts.jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      cells[i] = compute_frontier_cell(scenario, specs[i].lambda, specs[i].steps,
                                       specs[i].talr, cfg.alpha, cfg.talr);
    }
  };
  std::vector<std::thread> pool;
  for (int i = 1; i < jobs; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  mark_pareto(cells);

  fs::create_directories(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/frontier.csv", frontier_csv(cells));

  std::vector<ScatterPoint> points;
  for (const auto& c : cells) {
    if (c.status != "ok") continue;
    points.push_back({c.domain_gain, c.general_change, c.talr ? 1 : 0});
  }
  write_file_atomic(
      cfg.out_dir + "/frontier.svg",
      render_scatter_svg("domain gain vs general change", "domain gain -dL(P2) [nats]",
                         "general change -dL(P1) [nats]", points, {"none", "talr"}));
  write_file_atomic(cfg.out_dir + "/config.json", cfg.to_json_text());
  std::cout << cfg.out_dir << "\n";
  return 0;
}

GeneratedScenario load_scenario_arg(const std::string& path) {
  if (fs::is_directory(path)) {
    const ExperimentConfig cfg = ExperimentConfig::from_file(path + "/scenario.json");
    TokenTree p1 = TokenTree::from_text(read_file(path + "/p1.tree"));
    TokenTree p2 = TokenTree::from_text(read_file(path + "/p2.tree"));
    ModelState q0 = ModelState::from_text(read_file(path + "/q0.tree"));
    const auto hard =
        hard_set_from_text(p1.shape(), read_file(path + "/hard_set.txt"));
    return assemble_scenario(cfg.scenario, std::move(p1), std::move(p2), std::move(q0), hard);
  }
  return generate(ExperimentConfig::from_file(path).scenario);
}

int cmd_verify_bounds(const GlobalOptions& opts, const std::string& scenario_path,
                      const std::string& schedule_path, const std::string& out_csv) {
  const GeneratedScenario scenario = load_scenario_arg(scenario_path);
  ExperimentConfig sched_cfg;
  if (!schedule_path.empty()) sched_cfg = ExperimentConfig::from_file(schedule_path);
  const TiltingSchedule sched = sched_cfg.schedule();

  const BoundConstants constants = constants_for(scenario.params);
  const StepModulator modulator =
      sched_cfg.talr_modulator ? make_talr_modulator(sched_cfg.talr) : StepModulator{};
  const ScheduleRun run = run_schedule(scenario.q0, scenario.p2, sched, modulator);
  const BoundReport report =
      verify_multi_step(run, scenario, sched, constants, sched_cfg.talr_modulator);
  const ModelState tilde0 =
      smooth_target(scenario.p2, scenario.q0, sched.alpha, sched.reference);
  const VarianceCheck variance = verify_variance_bound(scenario, scenario.q0, tilde0);

  const std::string csv = report_csv(report, variance);
  if (out_csv.empty()) {
    std::cout << csv;
  } else {
    write_file_atomic(out_csv, csv);
  }
  return report_all_pass(report, variance) ? 0 : 1;
}

int cmd_verify_all(const GlobalOptions& opts, const std::string& selector) {
  const std::uint64_t seed = opts.seed.value_or(1);
  std::vector<CheckResult> results;
  try {
    results = run_battery(selector, seed);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig) {
      std::cerr << "usage: unknown selector '" << selector << "'\n";
      return 2;
    }
    throw;
  }
  std::printf("%-14s %10s %9s %14s\n", "check", "instances", "failures", "worst_margin");
  long failures = 0;
  for (const auto& r : results) {
    std::printf("%-14s %10ld %9ld %14.6g\n", r.name.c_str(), r.instances, r.failures,
                r.worst_margin);
    failures += r.failures;
  }
  return failures == 0 ? 0 : 1;
}

int cmd_talr_solve(const std::string& losses_path, const std::string& tau_arg, double floor,
                   const std::string& out_path) {
  std::ifstream in(losses_path);
  if (!in) fail(ErrorCode::IoError, "cannot open losses file " + losses_path);
  std::vector<double> losses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    losses.push_back(std::stod(line));
  }
  if (losses.empty()) fail(ErrorCode::EmptyBatch, "no losses in " + losses_path);

  double tau;
  if (tau_arg == "median") {
    TokenLossBatch batch;
    for (double l : losses) batch.sequences.push_back({l});
    tau = select_tau(batch);
  } else {
    tau = std::stod(tau_arg);
    if (!(tau > 0.0)) fail(ErrorCode::NonpositiveTau, "tau must be positive");
  }

  const auto weights =
      apply_floor(solve_weights_closed_form(losses, tau, WeightMode::kUnnormalized), floor);
  CsvTable csv({"index", "loss", "weight"});
  for (std::size_t i = 0; i < losses.size(); ++i) {
    csv.add_row({std::to_string(i), format_g17(losses[i]), format_g17(weights[i])});
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    write_file_atomic(out_path, csv.str());
  }
  return 0;
}

Response parse_tokens(const std::string& arg) {
  Response z;
  if (arg.empty() || arg == "-") return z;
  std::istringstream in(arg);
  std::string tok;
  while (std::getline(in, tok, ',')) z.push_back(std::stoi(tok));
  return z;
}

int cmd_encode(const std::string& model_path, const std::string& tokens_arg,
               const std::string& out_path) {
  const ModelState q = ModelState::from_text(read_file(model_path));
  const Response z = parse_tokens(tokens_arg);
  const CodedMessage msg = encode(z, q);
  const auto bytes = msg.to_bytes();
  {
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + out_path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  std::cout << "symbols=" << msg.symbol_count << " bits=" << msg.bit_length
            << " ideal_bits=" << format_g17(-q.log_path_prob(z) / std::log(2.0)) << "\n";
  return 0;
}

int cmd_decode(const std::string& model_path, const std::string& in_path) {
  const ModelState q = ModelState::from_text(read_file(model_path));
  std::ifstream in(in_path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read " + in_path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const Response z = decode(CodedMessage::from_bytes(data), q);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (i) std::cout << ',';
    std::cout << z[i];
  }
  std::cout << "\n";
  return 0;
}

int cmd_gen_scenario(const GlobalOptions& opts) {
  const ExperimentConfig cfg = load_config(opts);
  const GeneratedScenario scenario = generate(cfg.scenario);
  fs::create_directories(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/p1.tree", scenario.p1.to_text());
  write_file_atomic(cfg.out_dir + "/p2.tree", scenario.p2.to_text());
  write_file_atomic(cfg.out_dir + "/q0.tree", scenario.q0.to_text());
  write_file_atomic(cfg.out_dir + "/hard_set.txt",
                    hard_set_to_text(scenario.p1.shape(), scenario.hard_set));
  write_file_atomic(cfg.out_dir + "/scenario.json", cfg.to_json_text());

  nlohmann::ordered_json measured;
  measured["max_f_hard"] = scenario.measured_max_f_hard;
  measured["max_f_easy"] = scenario.measured_max_f_easy;
  measured["w_s"] = scenario.measured_w_s;
  measured["kl_p1_q0"] = scenario.measured_kl_p1_q0;
  write_file_atomic(cfg.out_dir + "/measured.json", measured.dump(2) + "\n");
  std::cout << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiltlab: token-tree tilting dynamics, TALR weights, bound verification"};
  app.require_subcommand(1);

  GlobalOptions opts;
  app.add_option("--config", opts.config_path, "experiment config (JSON)");
  app.add_option("--seed", opts.seed, "override experiment and scenario seed");
  app.add_option("--out", opts.out_dir, "output directory");
  app.add_option("--jobs", opts.jobs, "max concurrent sweep cells")->default_val(1);

  auto* simulate = app.add_subcommand("simulate", "run one schedule and verify bounds");
  auto* sweep = app.add_subcommand("sweep", "frontier sweep over (lambda, T, modulator)");

  auto* verify_bounds = app.add_subcommand("verify-bounds", "check bounds for one run");
  std::string scenario_path, schedule_path, out_csv;
  verify_bounds->add_option("--scenario", scenario_path,
                            "scenario config JSON or gen-scenario directory")
      ->required();
  verify_bounds->add_option("--schedule", schedule_path, "schedule config JSON");
  verify_bounds->add_option("--report", out_csv, "report CSV path (default: stdout)");

  auto* verify_all = app.add_subcommand("verify-all", "run the verification battery");
  std::string selector = "all";
  verify_all->add_option("selector", selector, "all or a single check name");

  auto* talr_solve = app.add_subcommand("talr-solve", "solve TALR weights for a loss file");
  std::string losses_path, tau_arg = "median", solve_out;
  double floor = kDefaultWeightFloor;
  talr_solve->add_option("--losses", losses_path, "one loss per line")->required();
  talr_solve->add_option("--tau", tau_arg, "positive number or 'median'");
  talr_solve->add_option("--floor", floor, "weight floor");
  talr_solve->add_option("--out", solve_out, "CSV path (default: stdout)");

  auto* encode_cmd = app.add_subcommand("encode", "arithmetic-code a response");
  std::string model_path, tokens_arg, msg_out = "message.tiltcode", msg_in;
  encode_cmd->add_option("--model", model_path, "ModelState in tree text format")->required();
  encode_cmd->add_option("--tokens", tokens_arg, "comma-separated token indices; '-' = empty");
  encode_cmd->add_option("--out", msg_out, "coded message path");

  auto* decode_cmd = app.add_subcommand("decode", "decode a coded message");
  decode_cmd->add_option("--model", model_path, "ModelState in tree text format")->required();
  decode_cmd->add_option("--in", msg_in, "coded message path")->required();

  auto* gen_scenario = app.add_subcommand("gen-scenario", "emit a generated scenario");

  try {
    app.parse(argc, argv);
    if (app.got_subcommand(simulate)) return cmd_simulate(opts);
    if (app.got_subcommand(sweep)) return cmd_sweep(opts);
    if (app.got_subcommand(verify_bounds))
      return cmd_verify_bounds(opts, scenario_path, schedule_path, out_csv);
    if (app.got_subcommand(verify_all)) return cmd_verify_all(opts, selector);
    if (app.got_subcommand(talr_solve))
      return cmd_talr_solve(losses_path, tau_arg, floor, solve_out);
    if (app.got_subcommand(encode_cmd)) return cmd_encode(model_path, tokens_arg, msg_out);
    if (app.got_subcommand(decode_cmd)) return cmd_decode(model_path, msg_in);
    if (app.got_subcommand(gen_scenario)) return cmd_gen_scenario(opts);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "ERROR " << error_code_name(e.code()) << ": " << e.message() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "ERROR Internal: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

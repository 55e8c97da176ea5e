#include "tiltlab/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "tiltlab/rng.hpp"

namespace tiltlab {

namespace {

constexpr double kHardFractionTarget = 0.03;  // calibration goal, relative
constexpr double kHardFractionAccept = 0.05;  // release gate, relative

// Expected supervised positions per path when every prefix stops with
// probability e: tokens plus the terminating EOS, depth-cut paths count d.
double expected_positions(double e, std::int32_t depth) {
  double acc = 0.0;
  double cont = 1.0;
  for (std::int32_t k = 0; k < depth; ++k) {
    acc += cont * e * (k + 1);
    cont *= (1.0 - e);
  }
  return acc + cont * depth;
}

double solve_eos_level(double target_m, std::int32_t depth) {
  double lo = 1e-3, hi = 0.999;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_positions(mid, depth) > target_m) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

struct EdgeKey {
  std::int64_t rank;
  std::int32_t child;
  auto operator<=>(const EdgeKey&) const = default;
};

// mass(z)/m(z) accumulated per visited edge; summing over a designated set S
// gives E[s/m] exactly.
std::map<EdgeKey, double> edge_visit_fractions(const ConditionalTable& table) {
  std::map<EdgeKey, double> acc;
  const auto paths = enumerate_paths(table);
  const TreeShape shape = table.shape();
  for (const auto& path : paths) {
    const std::int32_t m = static_cast<std::int32_t>(path.tokens.size()) +
                           (std::cmp_less(path.tokens.size(), shape.depth) ? 1 : 0);
    const double frac = path.prob / m;
    std::int64_t rank = 0;
    for (std::size_t i = 0; i < path.tokens.size(); ++i) {
      acc[{rank, path.tokens[i]}] += frac;
      if (i + 1 < static_cast<std::size_t>(shape.depth))
        rank = shape.child_rank(rank, static_cast<std::int32_t>(i), path.tokens[i]);
    }
    if (std::cmp_less(path.tokens.size(), shape.depth)) acc[{rank, shape.vocab}] += frac;
  }
  return acc;
}

struct EdgeDraws {
  double sign_u = 0.0;  // sign pattern seed
  double mag_u = 0.0;   // magnitude in [0,1)
  double leak_u = 0.0;  // leakage direction component
};

// Balances a group's offsets so sum_{a in G} q0(a) e^{g(a)} is preserved, then
// caps |g| at `cap` by joint rescaling; both steps commute in the fixed point.
void balance_and_cap(std::span<const double> q0_row, const std::vector<std::int32_t>& group,
                     std::vector<double>& offsets, double cap) {
  if (group.size() < 2) {
    for (std::int32_t a : group) offsets[a] = 0.0;
    return;
  }
  for (int round = 0; round < 60; ++round) {
    double base = 0.0, shifted = 0.0;
    for (std::int32_t a : group) {
      base += q0_row[a];
      shifted += q0_row[a] * std::exp(offsets[a]);
    }
    const double delta = std::log(base / shifted);
    double hi = 0.0;
    for (std::int32_t a : group) {
      offsets[a] += delta;
      hi = std::max(hi, std::fabs(offsets[a]));
    }
    if (hi <= cap) return;
    const double scale = cap / hi * 0.999;
    for (std::int32_t a : group) offsets[a] *= scale;
  }
  fail(ErrorCode::InfeasibleParams, "offset balancing did not settle");
}

}  // namespace

void SparseShiftScenario::validate() const {
  if (vocab < 3 || depth < 1) fail(ErrorCode::InfeasibleParams, "need vocab >= 3, depth >= 1");
  if (!(m_h > 0.0) || !(m_l >= 0.0)) fail(ErrorCode::InfeasibleParams, "bad magnitudes");
  if (m_l > m_h) fail(ErrorCode::InfeasibleParams, "M_l must not exceed M_h");
  if (!(beta >= 0.0 && beta < 1.0 && gamma >= 0.0 && gamma < 1.0))
    fail(ErrorCode::InfeasibleParams, "leakage outside [0, 1)");
  if (w_s <= 0.0 && s <= 0.0) fail(ErrorCode::InfeasibleParams, "need w_S or s");
  if (w_s > 0.0 && !(w_s < 1.0)) fail(ErrorCode::InfeasibleParams, "w_S outside (0, 1)");
  if (m > 0.0 && (m < 1.0 || m > static_cast<double>(depth)))
    fail(ErrorCode::InfeasibleParams, "m must lie in [1, depth]");
  if (!(kappa_init > 0.0)) fail(ErrorCode::InfeasibleParams, "kappa_init must be positive");
  if (!(hard_prefix_fraction > 0.0 && hard_prefix_fraction <= 1.0))
    fail(ErrorCode::InfeasibleParams, "hard_prefix_fraction outside (0, 1]");
}

bool GeneratedScenario::in_hard_set(std::int64_t prefix_rank, std::int32_t token) const {
  return std::binary_search(hard_set.begin(), hard_set.end(),
                            HardSetEntry{prefix_rank, token});
}

GeneratedScenario generate(const SparseShiftScenario& params) {
  params.validate();
  const TreeShape shape{params.vocab, params.depth};
  const std::int64_t n = shape.prefix_count();
  const std::int32_t w = shape.row_width();
  CounterRng root_rng(params.seed);

  // ---- hard-mass target ----------------------------------------------------
  const double m_used =
      params.m > 0.0 ? params.m : expected_positions(0.35, params.depth);
  double target = params.w_s;
  if (params.s > 0.0) {
    target = params.s / m_used;
    if (params.w_s > 0.0 && std::fabs(target - params.w_s) > 0.25 * params.w_s)
      fail(ErrorCode::InfeasibleParams, "w_S and s/m disagree by more than 25%");
  }
  if (!(target > 0.0 && target < 0.6))
    fail(ErrorCode::InfeasibleParams, "hard-mass target outside (0, 0.6)");

  // ---- fixed seeded structure ----------------------------------------------
  // A seeded subset of prefixes carries the shift: two designated hard tokens
  // whose q0 mass is built in directly, with a global scale calibrated so
  // that E[s/m] hits the target. All other prefixes stay easy throughout.
  const double eos_level =
      params.m > 0.0 ? solve_eos_level(params.m, params.depth) : 0.35;
  std::vector<std::array<std::int32_t, 2>> hard(static_cast<std::size_t>(n));
  std::vector<bool> shifted(static_cast<std::size_t>(n), false);
  std::vector<double> eos_u(static_cast<std::size_t>(n));
  std::vector<double> theta_u(static_cast<std::size_t>(n));  // split between h1, h2
  std::vector<double> jitter_u(static_cast<std::size_t>(n));
  std::vector<double> gaps(static_cast<std::size_t>(n) * w);  // easy-token shares
  std::vector<EdgeDraws> draws(static_cast<std::size_t>(n) * w);
  {
    CounterRng rng = root_rng.derive(1);
    for (std::int64_t r = 0; r < n; ++r) {
      const auto h1 = static_cast<std::int32_t>(rng.below(params.vocab));
      auto h2 = static_cast<std::int32_t>(rng.below(params.vocab - 1));
      if (h2 >= h1) ++h2;
      hard[static_cast<std::size_t>(r)] = {std::min(h1, h2), std::max(h1, h2)};
      eos_u[static_cast<std::size_t>(r)] =
          std::clamp(eos_level * rng.uniform(0.9, 1.1), 0.02, 0.95);
      theta_u[static_cast<std::size_t>(r)] = rng.uniform(0.35, 0.65);
      jitter_u[static_cast<std::size_t>(r)] = rng.uniform(0.85, 1.15);
    }
    for (double& g : gaps) g = 0.25 + rng.uniform();
    for (auto& d : draws) {
      d.sign_u = rng.uniform();
      d.mag_u = rng.uniform();
      d.leak_u = rng.uniform();
    }
    // Exactly max(1, round(fraction * n)) shifted prefixes, seeded selection.
    const auto k = std::max<std::int64_t>(
        1, std::llround(params.hard_prefix_fraction * static_cast<double>(n)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) order[static_cast<std::size_t>(r)] = r;
    for (std::int64_t r = n - 1; r > 0; --r) {
      const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r + 1)));
      std::swap(order[static_cast<std::size_t>(r)], order[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t i = 0; i < std::min<std::int64_t>(k, n); ++i)
      shifted[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  }
  std::vector<double> delta(static_cast<std::size_t>(n) * w);
  {
    CounterRng rng = root_rng.derive(2);
    for (double& d : delta) d = 2.0 * (rng.uniform() - 0.5);
  }

  const double leak = params.beta + params.gamma;
  const double easy_cap =
      leak > 0.0 ? 0.97 * params.effective_m_e() : 0.97 * std::max(params.m_l, 1e-12);

  // ---- build chain: P1 -> Q0 -> P2, all deterministic given (scale, kappa) --
  std::vector<double> p1_rows, q0_rows, p2_rows;

  auto build_p1 = [&](double scale) {
    p1_rows.assign(static_cast<std::size_t>(n) * w, 0.0);
    for (std::int64_t r = 0; r < n; ++r) {
      double* row = p1_rows.data() + static_cast<std::size_t>(r) * w;
      const double e_u = eos_u[static_cast<std::size_t>(r)];
      double w_u = 0.0;
      const auto& [h1, h2] = hard[static_cast<std::size_t>(r)];
      if (shifted[static_cast<std::size_t>(r)]) {
        w_u = std::clamp(scale * target * jitter_u[static_cast<std::size_t>(r)], 0.01,
                         0.75 * (1.0 - e_u));
        row[h1] = w_u * theta_u[static_cast<std::size_t>(r)];
        row[h2] = w_u - row[h1];
      }
      double total = 0.0;
      for (std::int32_t a = 0; a < params.vocab; ++a) {
        if (shifted[static_cast<std::size_t>(r)] && (a == h1 || a == h2)) continue;
        total += gaps[static_cast<std::size_t>(r) * w + a];
      }
      const double easy_budget = 1.0 - e_u - w_u;
      for (std::int32_t a = 0; a < params.vocab; ++a) {
        if (shifted[static_cast<std::size_t>(r)] && (a == h1 || a == h2)) continue;
        row[a] = easy_budget * gaps[static_cast<std::size_t>(r) * w + a] / total;
      }
      row[params.vocab] = e_u;
    }
  };

  double measured_kl = 0.0;
  auto build_q0 = [&]() {
    double pert = 0.2;
    for (int attempt = 0;; ++attempt) {
      q0_rows.assign(static_cast<std::size_t>(n) * w, 0.0);
      for (std::int64_t r = 0; r < n; ++r) {
        double* row = q0_rows.data() + static_cast<std::size_t>(r) * w;
        double sum = 0.0;
        for (std::int32_t a = 0; a < w; ++a) {
          row[a] = p1_rows[static_cast<std::size_t>(r) * w + a] *
                   std::exp(pert * delta[static_cast<std::size_t>(r) * w + a]);
          sum += row[a];
        }
        for (std::int32_t a = 0; a < w; ++a) row[a] /= sum;
      }
      measured_kl = kl_paths(ConditionalTable(shape, p1_rows),
                             ConditionalTable(shape, q0_rows));
      if (measured_kl <= 0.95 * params.kappa_init) return;
      if (attempt > 100) fail(ErrorCode::InfeasibleParams, "could not meet kappa_init");
      pert *= 0.7;
    }
  };

  auto build_p2 = [&]() {
    p2_rows.assign(static_cast<std::size_t>(n) * w, 0.0);
    for (std::int64_t r = 0; r < n; ++r) {
      const double* q_row = q0_rows.data() + static_cast<std::size_t>(r) * w;
      const bool is_shifted = shifted[static_cast<std::size_t>(r)];
      const auto& [h1, h2] = hard[static_cast<std::size_t>(r)];
      std::vector<std::int32_t> hard_r;
      std::vector<std::int32_t> easy_r;
      for (std::int32_t a = 0; a < w; ++a) {
        if (is_shifted && (a == h1 || a == h2)) {
          hard_r.push_back(a);
        } else {
          easy_r.push_back(a);
        }
      }
      std::vector<double> offset(static_cast<std::size_t>(w), 0.0);
      const auto* dr = draws.data() + static_cast<std::size_t>(r) * w;
      if (is_shifted) {
        const bool flip = dr[h1].sign_u < 0.5;
        offset[h1] = (flip ? -1.0 : 1.0) * (0.35 + 0.4 * dr[h1].mag_u) * params.m_h;
        offset[h2] = (flip ? 1.0 : -1.0) * (0.35 + 0.4 * dr[h2].mag_u) * params.m_h;
        balance_and_cap({q_row, static_cast<std::size_t>(w)}, hard_r, offset,
                        0.97 * params.m_h);
      }

      const bool easy_flip = dr[easy_r.front()].sign_u < 0.5;
      for (std::size_t i = 0; i < easy_r.size(); ++i) {
        const double sign = ((i % 2 == 0) != easy_flip) ? 1.0 : -1.0;
        offset[easy_r[i]] = sign * (0.2 + 0.4 * dr[easy_r[i]].mag_u) * params.m_l;
      }
      if (is_shifted && leak > 0.0 && easy_r.size() >= 2) {
        double hard_norm_sq = 0.0;
        for (std::int32_t a : hard_r) hard_norm_sq += q_row[a] * offset[a] * offset[a];
        double cur_sq = 0.0;
        std::vector<double> xi(static_cast<std::size_t>(w), 0.0);
        for (std::int32_t a : easy_r) {
          xi[a] = 2.0 * (dr[a].leak_u - 0.5);
          cur_sq += q_row[a] * xi[a] * xi[a];
        }
        if (cur_sq > 0.0) {
          double f = leak * std::sqrt(hard_norm_sq / cur_sq);
          double hi = 0.0;
          for (std::int32_t a : easy_r) hi = std::max(hi, std::fabs(f * xi[a]));
          const double cap = 0.9 * leak * params.m_h;
          if (hi > cap) f *= cap / hi;
          for (std::int32_t a : easy_r) offset[a] += f * xi[a];
        }
      }
      balance_and_cap({q_row, static_cast<std::size_t>(w)}, easy_r, offset, easy_cap);

      double* out = p2_rows.data() + static_cast<std::size_t>(r) * w;
      double sum = 0.0;
      for (std::int32_t a = 0; a < w; ++a) {
        out[a] = q_row[a] * std::exp(offset[a]);
        sum += out[a];
      }
      for (std::int32_t a = 0; a < w; ++a) out[a] /= sum;
    }
  };

  // ---- calibrate the built-in hard mass so E[s/m] (under P2) hits target ----
  double scale = 1.0;
  double measured_fraction = 0.0;
  for (int outer = 0; outer < 25; ++outer) {
    build_p1(scale);
    build_q0();
    build_p2();
    const auto acc = edge_visit_fractions(ConditionalTable(shape, p2_rows));
    measured_fraction = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
      if (!shifted[static_cast<std::size_t>(r)]) continue;
      const auto& [h1, h2] = hard[static_cast<std::size_t>(r)];
      for (std::int32_t a : {h1, h2}) {
        const auto it = acc.find({r, a});
        if (it != acc.end()) measured_fraction += it->second;
      }
    }
    if (std::fabs(measured_fraction - target) <= kHardFractionTarget * target) break;
    scale *= std::clamp(target / measured_fraction, 0.5, 2.0);
  }
  if (std::fabs(measured_fraction - target) > kHardFractionAccept * target)
    fail(ErrorCode::InfeasibleParams, "hard fraction calibration missed target");

  std::vector<HardSetEntry> hard_entries;
  for (std::int64_t r = 0; r < n; ++r) {
    if (!shifted[static_cast<std::size_t>(r)]) continue;
    const auto& [h1, h2] = hard[static_cast<std::size_t>(r)];
    hard_entries.push_back({r, h1});
    hard_entries.push_back({r, h2});
  }
  return assemble_scenario(params, TokenTree(shape, p1_rows), TokenTree(shape, p2_rows),
                           ModelState(shape, q0_rows, /*floor=*/0.0),
                           std::move(hard_entries));
}

GeneratedScenario assemble_scenario(const SparseShiftScenario& params, TokenTree p1,
                                    TokenTree p2, ModelState q0,
                                    std::vector<HardSetEntry> hard_set) {
  require_same_shape(p1.shape(), p2.shape());
  require_same_shape(p1.shape(), q0.shape());
  std::sort(hard_set.begin(), hard_set.end());
  GeneratedScenario out{params, std::move(p1), std::move(p2), std::move(q0),
                        std::move(hard_set)};
  const TreeShape shape = out.p1.shape();
  for (std::int64_t r = 0; r < shape.prefix_count(); ++r) {
    for (std::int32_t a = 0; a < shape.row_width(); ++a) {
      const double f = std::log(out.p2.entry(r, a) / out.q0.entry(r, a));
      if (out.in_hard_set(r, a)) {
        out.measured_max_f_hard = std::max(out.measured_max_f_hard, std::fabs(f));
      } else {
        out.measured_max_f_easy = std::max(out.measured_max_f_easy, std::fabs(f));
      }
    }
  }
  const auto acc = edge_visit_fractions(out.p2);
  for (const auto& entry : out.hard_set) {
    const auto it = acc.find({entry.prefix_rank, entry.token});
    if (it != acc.end()) out.measured_w_s += it->second;
  }
  out.measured_kl_p1_q0 = kl_paths(out.p1, out.q0);
  return out;
}

HardStats measure_hard_stats(const TokenTree& data, const ModelState& model, double p_hard) {
  require_same_shape(data.shape(), model.shape());
  if (!(p_hard >= 0.0 && p_hard < 1.0))
    fail(ErrorCode::InfeasibleParams, "p_hard outside [0, 1)");
  HardStats stats;
  const TreeShape shape = data.shape();
  const auto paths = enumerate_paths(data);
  for (const auto& path : paths) {
    std::int32_t hard_count = 0;
    std::int32_t positions = 0;
    std::int64_t rank = 0;
    auto visit = [&](std::int32_t sym) {
      ++positions;
      if (model.entry(rank, sym) < p_hard) ++hard_count;
    };
    for (std::size_t i = 0; i < path.tokens.size(); ++i) {
      visit(path.tokens[i]);
      if (i + 1 < static_cast<std::size_t>(shape.depth))
        rank = shape.child_rank(rank, static_cast<std::int32_t>(i), path.tokens[i]);
    }
    if (std::cmp_less(path.tokens.size(), shape.depth)) visit(shape.vocab);
    stats.s_measured += path.prob * hard_count;
    stats.m_mean += path.prob * positions;
    stats.w_s_measured += path.prob * hard_count / positions;
  }
  return stats;
}

HardStats measure_hard_stats(const GeneratedScenario& scenario, double p_hard) {
  return measure_hard_stats(scenario.p2, scenario.q0, p_hard);
}

std::string hard_set_to_text(const TreeShape& shape, std::span<const HardSetEntry> hard_set) {
  std::string out;
  for (const auto& entry : hard_set) {
    const auto prefix = shape.prefix_of_rank(entry.prefix_rank);
    if (prefix.empty()) {
      out += "root";
    } else {
      for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(prefix[i]);
      }
    }
    out += ':';
    out += std::to_string(entry.token);
    out += '\n';
  }
  return out;
}

std::vector<HardSetEntry> hard_set_from_text(const TreeShape& shape, const std::string& text) {
  std::vector<HardSetEntry> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) fail(ErrorCode::IoError, "bad hard-set line: " + line);
    std::vector<std::int32_t> prefix;
    const std::string head = line.substr(0, colon);
    if (head != "root") {
      std::istringstream hs(head);
      std::string tok;
      while (std::getline(hs, tok, ',')) prefix.push_back(std::stoi(tok));
    }
    HardSetEntry entry;
    entry.prefix_rank = shape.rank_of(prefix);
    entry.token = std::stoi(line.substr(colon + 1));
    if (entry.token < 0 || entry.token > shape.vocab)
      fail(ErrorCode::IoError, "hard-set token out of range");
    out.push_back(entry);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace tiltlab

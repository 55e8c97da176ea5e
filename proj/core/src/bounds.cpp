#include "tiltlab/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "tiltlab/rng.hpp"

namespace tiltlab {

namespace {

struct PathView {
  std::vector<double> p;  // terminal masses
};

// f(z) = log p~2(z) - log q(z) over terminals plus the moments the bounds use.
struct PathF {
  std::vector<double> f;
  double mean_q = 0.0;  // E_Q[f]
  double var_q = 0.0;   // Var_Q(f), path level
};

PathF path_f(const std::vector<double>& q_term, const std::vector<double>& tilde_term) {
  PathF out;
  out.f.resize(q_term.size());
  for (std::size_t i = 0; i < q_term.size(); ++i) {
    out.f[i] = std::log(tilde_term[i] / q_term[i]);
    out.mean_q += q_term[i] * out.f[i];
  }
  for (std::size_t i = 0; i < q_term.size(); ++i) {
    const double d = out.f[i] - out.mean_q;
    out.var_q += q_term[i] * d * d;
  }
  return out;
}

double expect(const std::vector<double>& dist, const std::vector<double>& g) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) acc += dist[i] * g[i];
  return acc;
}

BoundCheck make_check(std::string name, double measured, double bound, bool degenerate = false) {
  BoundCheck c;
  c.name = std::move(name);
  c.measured = measured;
  c.bound = bound;
  c.margin = bound - measured;
  c.pass = c.margin >= kBoundMarginTol;
  c.degenerate = degenerate;
  return c;
}

}  // namespace

// ============================================================================
// Regression helpers
// ============================================================================

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  LinearFit f;
  const double denom = n * sxx - sx * sx;
  f.slope = (n * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / static_cast<double>(n);
  return f;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 1e-300) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 2) fail(ErrorCode::InsufficientRuns, "not enough points for a slope");
  return linear_fit(lx, ly).slope;
}

double power_law_slope(std::span<const double> x, std::span<const double> y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 1e-300) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 4) fail(ErrorCode::InsufficientRuns, "not enough points for a power law");

  auto window_fit = [&](std::size_t lo, std::size_t len, double* r2) {
    const std::span<const double> wx{lx.data() + lo, len};
    const std::span<const double> wy{ly.data() + lo, len};
    const LinearFit f = linear_fit(wx, wy);
    double ss_res = 0.0, ss_tot = 0.0, mean = 0.0;
    for (double v : wy) mean += v;
    mean /= static_cast<double>(len);
    for (std::size_t i = 0; i < len; ++i) {
      const double pred = f.intercept + f.slope * wx[i];
      ss_res += (wy[i] - pred) * (wy[i] - pred);
      ss_tot += (wy[i] - mean) * (wy[i] - mean);
    }
    *r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return f.slope;
  };

  double best_r2 = -HUGE_VAL, best_slope = 0.0;
  std::size_t best_len = 0, best_lo = lx.size();
  for (std::size_t lo = 0; lo + 4 <= lx.size(); ++lo) {
    for (std::size_t len = 4; lo + len <= lx.size(); ++len) {
      double r2 = 0.0;
      const double slope = window_fit(lo, len, &r2);
      const bool better =
          r2 > best_r2 + 1e-6 ||
          (r2 > best_r2 - 1e-6 && (len > best_len || (len == best_len && lo < best_lo)));
      if (better) {
        best_r2 = std::max(best_r2, r2);
        best_slope = slope;
        best_len = len;
        best_lo = lo;
      }
    }
  }
  return best_slope;
}

// ============================================================================
// Lemma checks
// ============================================================================

double verify_kl_identity(const TokenTree& p, const ModelState& q, const ModelState& p_tilde2) {
  require_same_shape(p.shape(), q.shape());
  require_same_shape(p.shape(), p_tilde2.shape());
  const auto pv = p.terminal_masses();
  const auto qv = q.terminal_masses();
  const auto tv = p_tilde2.terminal_masses();
  const PathF f = path_f(qv, tv);
  const double lhs = expect(pv, f.f) - f.mean_q;
  const double rhs = divergence(Divergence::kKl, pv, qv) + divergence(Divergence::kKl, qv, tv) -
                     divergence(Divergence::kKl, pv, tv);
  return std::fabs(lhs - rhs);
}

namespace {

// Response-level tilt q_lambda(z) ~ q(z) e^{lambda f(z)} and the resulting
// Delta L(P) = KL(P||Q_lambda) - KL(P||Q), all on terminal vectors.
double response_delta_l(const std::vector<double>& pv, const std::vector<double>& qv,
                        const std::vector<double>& f, double lambda) {
  double hi = -HUGE_VAL;
  std::vector<double> logq(qv.size());
  for (std::size_t i = 0; i < qv.size(); ++i) {
    logq[i] = std::log(qv[i]) + lambda * f[i];
    hi = std::max(hi, logq[i]);
  }
  double z = 0.0;
  for (double v : logq) z += std::exp(v - hi);
  const double log_z = hi + std::log(z);
  double delta = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] == 0.0) continue;
    delta -= pv[i] * (lambda * f[i] - log_z);  // log(q_lambda/q) = lambda f - psi
  }
  return delta;
}

}  // namespace

FirstOrderFit verify_first_order_lemma(const TokenTree& p, const ModelState& q,
                                       const ModelState& p_tilde2,
                                       std::span<const double> lambda_grid) {
  require_same_shape(p.shape(), q.shape());
  require_same_shape(p.shape(), p_tilde2.shape());
  const auto pv = p.terminal_masses();
  const auto qv = q.terminal_masses();
  const auto tv = p_tilde2.terminal_masses();
  const PathF f = path_f(qv, tv);
  const double delta_e = expect(pv, f.f) - f.mean_q;

  FirstOrderFit fit;
  for (double lambda : lambda_grid) {
    if (!(lambda > 0.0 && lambda <= kLambdaSmallStepCap))
      fail(ErrorCode::LambdaOutOfRange, "lemma grid must lie in (0, 0.3]");
    const double dl = response_delta_l(pv, qv, f.f, lambda);
    const double expansion = -lambda * delta_e + 0.5 * lambda * lambda * f.var_q;
    fit.lambdas.push_back(lambda);
    fit.remainders.push_back(std::fabs(dl - expansion));
  }
  // The remainder is |c3 l^3 + c4 l^4 + ...|; opposite-sign coefficients can
  // put a root inside the grid, so the power law is identified on the best
  // contiguous window (near-root points destroy the log-space R^2).
  fit.cubic_slope = power_law_slope(fit.lambdas, fit.remainders);

  const double h = 1e-5;
  const double sym =
      (response_delta_l(pv, qv, f.f, h) - response_delta_l(pv, qv, f.f, -h)) / (2.0 * h);
  fit.derivative_error = std::fabs(sym + delta_e);
  return fit;
}

VarianceCheck verify_variance_bound(const GeneratedScenario& scenario, const ModelState& q_t,
                                    const ModelState& p_tilde2) {
  require_same_shape(q_t.shape(), p_tilde2.shape());
  const TreeShape shape = q_t.shape();
  const double m_h = scenario.params.m_h;
  const double m_e = scenario.params.effective_m_e();
  const auto mass = q_t.node_masses();

  VarianceCheck out;
  out.worst_prefix_margin = HUGE_VAL;
  double agg_var = 0.0, agg_bound = 0.0, agg_mass = 0.0;
  for (std::int64_t r = 0; r < shape.prefix_count(); ++r) {
    const auto q = q_t.row(r);
    const auto t = p_tilde2.row(r);
    double mean = 0.0, w_u = 0.0;
    std::vector<double> f(q.size());
    for (std::size_t a = 0; a < q.size(); ++a) {
      f[a] = std::log(t[a] / q[a]);
      mean += q[a] * f[a];
      if (scenario.in_hard_set(r, static_cast<std::int32_t>(a))) w_u += q[a];
    }
    double var = 0.0;
    for (std::size_t a = 0; a < q.size(); ++a) {
      const double d = f[a] - mean;
      var += q[a] * d * d;
    }
    const double bound = w_u * m_h * m_h + m_e * m_e;
    out.worst_prefix_margin = std::min(out.worst_prefix_margin, bound - var);
    out.max_prefix_var = std::max(out.max_prefix_var, var);
    const double m = mass[static_cast<std::size_t>(r)];
    agg_var += m * var;
    agg_bound += m * bound;
    agg_mass += m;
  }
  out.aggregate_var = agg_var / agg_mass;
  out.aggregate_margin = (agg_bound - agg_var) / agg_mass;
  return out;
}

// ============================================================================
// First-order approximation law
// ============================================================================

namespace {

// Full theorem residual: || log q_next - [(1-l) log q + l log p~2 - psi(l)] ||.
double law_residual(const ModelState& q, const ModelState& q_next, const ModelState& p_tilde2,
                    std::int64_t rank, double lambda_hat) {
  const auto qr = q.row(rank);
  const auto nr = q_next.row(rank);
  const auto tr = p_tilde2.row(rank);
  double psi = 0.0;
  {
    double hi = -HUGE_VAL;
    std::vector<double> logs(qr.size());
    for (std::size_t a = 0; a < qr.size(); ++a) {
      logs[a] = (1.0 - lambda_hat) * std::log(qr[a]) + lambda_hat * std::log(tr[a]);
      hi = std::max(hi, logs[a]);
    }
    double z = 0.0;
    for (double v : logs) z += std::exp(v - hi);
    psi = hi + std::log(z);
  }
  double acc = 0.0;
  for (std::size_t a = 0; a < qr.size(); ++a) {
    const double approx =
        (1.0 - lambda_hat) * std::log(qr[a]) + lambda_hat * std::log(tr[a]) - psi;
    const double d = std::log(nr[a]) - approx;
    acc += qr[a] * d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

std::int64_t best_law_prefix(const ModelState& q, const ModelState& p_tilde2) {
  require_same_shape(q.shape(), p_tilde2.shape());
  std::int64_t best = 0;
  double best_var = -1.0;
  for (std::int64_t r = 0; r < q.prefix_count(); ++r) {
    const auto qr = q.row(r);
    const auto tr = p_tilde2.row(r);
    double mean = 0.0;
    for (std::size_t a = 0; a < qr.size(); ++a) mean += qr[a] * std::log(tr[a] / qr[a]);
    double var = 0.0;
    for (std::size_t a = 0; a < qr.size(); ++a) {
      const double d = std::log(tr[a] / qr[a]) - mean;
      var += qr[a] * d * d;
    }
    if (var > best_var) {
      best_var = var;
      best = r;
    }
  }
  return best;
}

std::vector<LawPoint> first_order_law_points(const ModelState& q, const ModelState& p_tilde2,
                                             std::span<const double> lambda_grid,
                                             std::uint64_t seed, std::int64_t prefix_rank) {
  require_same_shape(q.shape(), p_tilde2.shape());
  const TreeShape shape = q.shape();
  const std::int32_t w = shape.row_width();
  const std::int64_t n = shape.prefix_count();

  // Seeded O(1) direction h, centered per row under q.
  std::vector<double> h(static_cast<std::size_t>(n) * w);
  CounterRng rng(seed, 17);
  for (double& v : h) v = rng.uniform(-1.0, 1.0);
  for (std::int64_t r = 0; r < n; ++r) {
    const auto qr = q.row(r);
    double mean = 0.0;
    for (std::int32_t a = 0; a < w; ++a) mean += qr[a] * h[static_cast<std::size_t>(r) * w + a];
    for (std::int32_t a = 0; a < w; ++a) h[static_cast<std::size_t>(r) * w + a] -= mean;
  }

  std::vector<LawPoint> points;
  for (double lambda : lambda_grid) {
    std::vector<double> shift(static_cast<std::size_t>(n) * w);
    for (std::int64_t r = 0; r < n; ++r) {
      const auto qr = q.row(r);
      const auto tr = p_tilde2.row(r);
      for (std::int32_t a = 0; a < w; ++a) {
        const double rdir = std::log(tr[a] / qr[a]);
        shift[static_cast<std::size_t>(r) * w + a] =
            lambda * rdir + lambda * lambda * h[static_cast<std::size_t>(r) * w + a];
      }
    }
    const ModelState q_next = apply_log_shift(q, shift);

    LawPoint pt;
    pt.lambda = lambda;
    pt.eps = divergence(Divergence::kKl, std::vector<double>(q.row(prefix_rank).begin(),
                                                             q.row(prefix_rank).end()),
                        std::vector<double>(q_next.row(prefix_rank).begin(),
                                            q_next.row(prefix_rank).end()));
    pt.effective = effective_step(q, q_next, p_tilde2, prefix_rank);
    pt.residual = law_residual(q, q_next, p_tilde2, prefix_rank, pt.effective);
    {
      const auto qr = q.row(prefix_rank);
      const auto nr = q_next.row(prefix_rank);
      double mean = 0.0;
      std::vector<double> s(qr.size());
      for (std::size_t a = 0; a < qr.size(); ++a) {
        s[a] = std::log(nr[a] / qr[a]);
        mean += qr[a] * s[a];
      }
      for (std::size_t a = 0; a < qr.size(); ++a) {
        const double d = s[a] - mean;
        pt.s_norm_sq += qr[a] * d * d;
      }
    }
    points.push_back(pt);
  }
  return points;
}

// ============================================================================
// Constants estimation and theorem checks
// ============================================================================

std::string family_descriptor(const SparseShiftScenario& p) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "v%d_d%d_ws%.4g_mh%.4g_ml%.4g_b%.4g_g%.4g_s%.4g_m%.4g",
                p.vocab, p.depth, p.w_s, p.m_h, p.m_l, p.beta, p.gamma, p.s, p.m);
  return buf;
}

namespace {

struct StepQuantities {
  double delta_l_p1 = 0.0;
  double delta_l_p2 = 0.0;
  double delta_e_p2 = 0.0;  // E_{P2}[f] - E_Q[f]
  double var_q = 0.0;       // path-level Var_Q(f)
  double chi2_p1 = 0.0;
  double kl_q_tilde = 0.0;   // KL(Q||P~2)
  double kl_p2_tilde = 0.0;  // KL(P2||P~2)
};

StepQuantities step_quantities(const TokenTree& p1, const TokenTree& p2, const ModelState& q,
                               const ModelState& p_tilde2, const ModelState& q_next) {
  const auto p1v = p1.terminal_masses();
  const auto p2v = p2.terminal_masses();
  const auto qv = q.terminal_masses();
  const auto nv = q_next.terminal_masses();
  const auto tv = p_tilde2.terminal_masses();
  const PathF f = path_f(qv, tv);

  StepQuantities s;
  s.delta_l_p1 =
      divergence(Divergence::kKl, p1v, nv) - divergence(Divergence::kKl, p1v, qv);
  s.delta_l_p2 =
      divergence(Divergence::kKl, p2v, nv) - divergence(Divergence::kKl, p2v, qv);
  s.delta_e_p2 = expect(p2v, f.f) - f.mean_q;
  s.var_q = f.var_q;
  s.chi2_p1 = divergence(Divergence::kChiSquare, p1v, qv);
  s.kl_q_tilde = divergence(Divergence::kKl, qv, tv);
  s.kl_p2_tilde = divergence(Divergence::kKl, p2v, tv);
  return s;
}

double percentile99(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t idx = static_cast<std::size_t>(
      std::ceil(0.99 * static_cast<double>(values.size()))) - 1;
  return values[std::min(idx, values.size() - 1)];
}

}  // namespace

BoundConstants estimate_constants(std::span<const GeneratedScenario> family,
                                  std::span<const double> lambda_grid, double alpha) {
  if (family.size() * lambda_grid.size() < 50)
    fail(ErrorCode::InsufficientRuns, "need at least 50 (scenario, lambda) runs");
  const std::string descriptor = family_descriptor(family.front().params);
  for (const auto& sc : family) {
    if (family_descriptor(sc.params) != descriptor)
      fail(ErrorCode::ConstantsMissing, "family mismatch in estimation inputs");
  }

  std::vector<double> rem1, rem2;
  for (const auto& sc : family) {
    const ModelState p_tilde2 =
        smooth_target(sc.p2, sc.q0, alpha, ReferenceKind::kUniform);
    for (double lambda : lambda_grid) {
      if (!(lambda > 0.0 && lambda <= kLambdaSmallStepCap))
        fail(ErrorCode::LambdaOutOfRange, "estimation grid must lie in (0, 0.3]");
      const ModelState q_next = tilt(sc.q0, p_tilde2, lambda);
      const StepQuantities s = step_quantities(sc.p1, sc.p2, sc.q0, p_tilde2, q_next);
      const double l2 = lambda * lambda;
      rem1.push_back(
          std::fabs(s.delta_l_p1 - lambda * std::sqrt(s.var_q) * std::sqrt(s.chi2_p1)) / l2);
      rem2.push_back(std::fabs(s.delta_l_p2 + lambda * s.delta_e_p2) / l2);
    }
  }
  BoundConstants c;
  c.c1 = percentile99(rem1);
  c.c2 = percentile99(rem2);
  c.family = descriptor;
  c.runs = static_cast<int>(rem1.size());
  return c;
}

bool BoundReport::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const BoundCheck& c) { return c.pass; });
}

namespace {

void require_constants(const BoundConstants& constants, const std::string& family) {
  if (constants.family.empty() || constants.runs == 0)
    fail(ErrorCode::ConstantsMissing, "estimate constants before verifying bounds");
  if (constants.family != family)
    fail(ErrorCode::ConstantsMissing,
         "family mismatch: constants for " + constants.family + ", run is " + family);
}

}  // namespace

BoundReport verify_one_step(const TokenTree& p1, const TokenTree& p2, const ModelState& q,
                            const ModelState& p_tilde2, double lambda,
                            const BoundConstants& constants, const std::string& family) {
  require_constants(constants, family);
  if (!(lambda >= 0.0 && lambda <= kLambdaSmallStepCap))
    fail(ErrorCode::LambdaOutOfRange, "one-step checks require lambda in [0, 0.3]");

  const ModelState q_next = tilt(q, p_tilde2, lambda);
  const StepQuantities s = step_quantities(p1, p2, q, p_tilde2, q_next);
  const double l2 = lambda * lambda;

  BoundReport report;
  report.delta_l_p1 = s.delta_l_p1;
  report.delta_l_p2 = s.delta_l_p2;
  report.h_t = std::sqrt(s.chi2_p1);
  report.lambda_sum = lambda;
  report.lambda_sq_sum = l2;

  report.checks.push_back(make_check(
      "one_step_p1", s.delta_l_p1,
      lambda * std::sqrt(s.var_q) * std::sqrt(s.chi2_p1) + constants.c1 * l2));
  const double linear_p2 = s.kl_q_tilde - s.kl_p2_tilde;
  report.checks.push_back(make_check("one_step_p2", s.delta_l_p2,
                                     -lambda * linear_p2 + constants.c2 * l2,
                                     std::fabs(linear_p2) < 1e-12));

  // Oracle-target corollary, applicable when the tilt target is P2 itself.
  bool tilde_is_p2 = true;
  for (std::size_t i = 0; i < p2.raw().size() && tilde_is_p2; ++i) {
    if (std::fabs(p2.raw()[i] - p_tilde2.raw()[i]) > 1e-12) tilde_is_p2 = false;
  }
  if (tilde_is_p2) {
    const double kl_q_p2 = kl_paths(q, p2);
    report.mu_t = kl_q_p2;
    report.checks.push_back(make_check("one_step_p2_oracle", s.delta_l_p2,
                                       -lambda * kl_q_p2 + constants.c2 * l2,
                                       kl_q_p2 < 1e-12));
  } else {
    report.mu_t = kl_paths(q, p2);
  }
  return report;
}

BoundReport verify_multi_step(const ScheduleRun& run, const GeneratedScenario& scenario,
                              const TiltingSchedule& schedule, const BoundConstants& constants,
                              bool modulated) {
  require_constants(constants, family_descriptor(scenario.params));
  if (run.states.size() != schedule.lambdas.size() + 1)
    fail(ErrorCode::ShapeMismatch, "trajectory length does not match the schedule");

  const auto p1v = scenario.p1.terminal_masses();
  const auto p2v = scenario.p2.terminal_masses();
  const std::size_t t_total = schedule.lambdas.size();

  BoundReport report;
  report.lambda_sum = schedule.lambda_sum();
  report.lambda_sq_sum = schedule.lambda_sq_sum();
  report.mu_t = HUGE_VAL;

  double linear_p2_sum = 0.0;
  double chi2_first = 0.0;
  double chi2_max = 0.0;
  for (std::size_t t = 0; t < t_total; ++t) {
    const ModelState& q_t = run.states[t];
    const auto qv = q_t.terminal_masses();
    const double chi2 = divergence(Divergence::kChiSquare, p1v, qv);
    if (t == 0) chi2_first = chi2;
    chi2_max = std::max(chi2_max, chi2);
    report.h_t = std::max(report.h_t, std::sqrt(chi2));
    report.mu_t = std::min(report.mu_t, kl_paths(q_t, scenario.p2));

    const ModelState p_tilde2 =
        smooth_target(scenario.p2, q_t, schedule.alpha, schedule.reference);
    const auto tv = p_tilde2.terminal_masses();
    const PathF f = path_f(qv, tv);
    double e_p2 = 0.0;
    for (std::size_t i = 0; i < p2v.size(); ++i) e_p2 += p2v[i] * f.f[i];
    linear_p2_sum += schedule.lambdas[t] * (e_p2 - f.mean_q);
  }
  report.chi2_blowup = chi2_first > 0.0 && chi2_max > 100.0 * chi2_first;

  const auto q0v = run.states.front().terminal_masses();
  const auto qtv = run.states.back().terminal_masses();
  report.delta_l_p1 =
      divergence(Divergence::kKl, p1v, qtv) - divergence(Divergence::kKl, p1v, q0v);
  report.delta_l_p2 =
      divergence(Divergence::kKl, p2v, qtv) - divergence(Divergence::kKl, p2v, q0v);

  const double a_coeff =
      report.h_t * (std::sqrt(scenario.measured_w_s) * scenario.params.m_h +
                    scenario.params.effective_m_e());
  report.checks.push_back(make_check(
      "multi_step_p1", report.delta_l_p1,
      a_coeff * report.lambda_sum + constants.c1 * report.lambda_sq_sum));
  if (!modulated) {
    report.checks.push_back(make_check(
        "multi_step_p2", report.delta_l_p2,
        -linear_p2_sum + constants.c2 * report.lambda_sq_sum,
        std::fabs(linear_p2_sum) < 1e-12));
  }
  return report;
}

// ============================================================================
// Closed-form evaluators
// ============================================================================

double min_total_weight(double mu_t, double c2, double delta_star, std::int32_t steps) {
  if (!(mu_t > 0.0) || c2 < 0.0 || delta_star < 0.0 || steps < 1)
    fail(ErrorCode::NonpositiveInput, "bad inputs to min_total_weight");
  if (delta_star == 0.0) return 0.0;
  if (c2 < 1e-300) return delta_star / mu_t;
  const double t = static_cast<double>(steps);
  const double disc = mu_t * mu_t - 4.0 * c2 * delta_star / t;
  if (disc < 0.0)
    fail(ErrorCode::InfeasibleT, "T <= 4 C2 Delta*/mu^2: no feasible schedule");
  return t / (2.0 * c2) * (mu_t - std::sqrt(disc));
}

double lambda_max(double h_t, double v_s, double c1, double eps_fg, std::int32_t steps) {
  if (!(h_t > 0.0) || !(v_s > 0.0) || c1 < 0.0 || eps_fg < 0.0 || steps < 1)
    fail(ErrorCode::NonpositiveInput, "bad inputs to lambda_max");
  const double hv = h_t * v_s;
  const double t = static_cast<double>(steps);
  if (c1 < 1e-300) return eps_fg / (hv * t);
  return (-hv + std::sqrt(hv * hv + 4.0 * c1 * eps_fg / t)) / (2.0 * c1);
}

double v_s_formula(double s, double m, double m_h, double m_e) {
  if (s < 0.0 || m < s || m_h < 0.0 || m_e < 0.0)
    fail(ErrorCode::NonpositiveInput, "bad inputs to v_s_formula");
  return std::sqrt(s * m_h * m_h + (m - s) * m_e * m_e);
}

double fixed_target_bound(double a, double mu_t, double c1, double c2, double delta_star,
                          std::int32_t steps) {
  if (!(mu_t > 0.0) || steps < 1) fail(ErrorCode::NonpositiveInput, "bad fixed-target inputs");
  return a * delta_star / mu_t +
         (a * c2 / (mu_t * mu_t * mu_t) + c1 / (mu_t * mu_t)) * delta_star * delta_star /
             static_cast<double>(steps);
}

// ============================================================================
// Sweeps and calibration
// ============================================================================

RunSummary summarize_run(const GeneratedScenario& scenario, const ScheduleRun& run) {
  RunSummary s;
  const auto p1v = scenario.p1.terminal_masses();
  const auto p2v = scenario.p2.terminal_masses();
  const auto q0v = run.states.front().terminal_masses();
  const auto qtv = run.states.back().terminal_masses();
  s.domain_gain = divergence(Divergence::kKl, p2v, q0v) - divergence(Divergence::kKl, p2v, qtv);
  s.general_change =
      divergence(Divergence::kKl, p1v, q0v) - divergence(Divergence::kKl, p1v, qtv);
  double acc = 0.0;
  for (const auto& d : run.diagnostics) acc += d.step_kl;
  s.mean_step_kl = run.diagnostics.empty() ? 0.0 : acc / run.diagnostics.size();
  return s;
}

FrontierCell compute_frontier_cell(const GeneratedScenario& scenario, double lambda,
                                   std::int32_t steps, bool talr, double alpha,
                                   const TalrConfig& talr_cfg) {
  FrontierCell cell;
  cell.lambda = lambda;
  cell.steps = steps;
  cell.talr = talr;
  try {
    const TiltingSchedule sched = TiltingSchedule::equal_steps(steps, lambda, alpha);
    const StepModulator modulator = talr ? make_talr_modulator(talr_cfg) : StepModulator{};
    const ScheduleRun run = run_schedule(scenario.q0, scenario.p2, sched, modulator);
    const RunSummary s = summarize_run(scenario, run);
    cell.domain_gain = s.domain_gain;
    cell.general_change = s.general_change;
    cell.mean_step_kl = s.mean_step_kl;
  } catch (const Error& e) {
    cell.status = std::string("error:") + error_code_name(e.code());
    cell.domain_gain = cell.general_change = cell.mean_step_kl =
        std::numeric_limits<double>::quiet_NaN();
  }
  return cell;
}

void mark_pareto(std::vector<FrontierCell>& cells) {
  for (auto& cell : cells) {
    if (cell.status != "ok") continue;
    cell.pareto = true;
    for (const auto& other : cells) {
      if (&other == &cell || other.status != "ok") continue;
      const bool geq = other.domain_gain >= cell.domain_gain &&
                       other.general_change >= cell.general_change;
      const bool strict = other.domain_gain > cell.domain_gain ||
                          other.general_change > cell.general_change;
      if (geq && strict) {
        cell.pareto = false;
        break;
      }
    }
  }
}

std::vector<FrontierCell> frontier_sweep(const GeneratedScenario& scenario,
                                         std::span<const double> lambdas,
                                         std::span<const std::int32_t> t_grid,
                                         bool include_talr, double alpha,
                                         const TalrConfig& talr_cfg) {
  if (lambdas.empty() || t_grid.empty()) fail(ErrorCode::EmptyInput, "empty sweep grid");
  std::vector<FrontierCell> cells;
  for (double lambda : lambdas) {
    for (std::int32_t t : t_grid) {
      for (int mod = 0; mod <= (include_talr ? 1 : 0); ++mod) {
        cells.push_back(compute_frontier_cell(scenario, lambda, t, mod == 1, alpha, talr_cfg));
      }
    }
  }
  mark_pareto(cells);
  return cells;
}

double calibrate_lambda_for_gain(const GeneratedScenario& scenario, std::int32_t steps,
                                 double alpha, const StepModulator& modulator,
                                 double target_gain, double rel_tol) {
  if (!(target_gain > 0.0)) fail(ErrorCode::NonpositiveInput, "target gain must be positive");
  auto gain_at = [&](double lambda) {
    const TiltingSchedule sched = TiltingSchedule::equal_steps(steps, lambda, alpha);
    return summarize_run(scenario, run_schedule(scenario.q0, scenario.p2, sched, modulator))
        .domain_gain;
  };
  double lo = 0.0, hi = 1.0;
  if (gain_at(hi) < target_gain * (1.0 - rel_tol))
    fail(ErrorCode::InfeasibleParams, "target gain unreachable at lambda = 1");
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double g = gain_at(mid);
    if (std::fabs(g - target_gain) <= rel_tol * target_gain) return mid;
    if (g < target_gain) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace tiltlab

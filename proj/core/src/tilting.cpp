#include "tiltlab/tilting.hpp"

#include <algorithm>
#include <cmath>

namespace tiltlab {

double TiltingSchedule::lambda_sum() const {
  double s = 0.0;
  for (double l : lambdas) s += l;
  return s;
}

double TiltingSchedule::lambda_sq_sum() const {
  double s = 0.0;
  for (double l : lambdas) s += l * l;
  return s;
}

void TiltingSchedule::validate() const {
  if (lambdas.empty()) fail(ErrorCode::InvalidConfig, "schedule needs at least one step");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) fail(ErrorCode::LambdaOutOfRange, "lambda_t outside [0, 1]");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorCode::AlphaOutOfRange, "alpha outside (0, 1)");
}

TiltingSchedule TiltingSchedule::equal_steps(std::int32_t t, double lambda, double alpha,
                                             ReferenceKind reference) {
  TiltingSchedule s;
  s.lambdas.assign(static_cast<std::size_t>(t), lambda);
  s.alpha = alpha;
  s.reference = reference;
  s.validate();
  return s;
}

ModelState smooth_target(const TokenTree& p_hat2, const ModelState& q_t, double alpha,
                         ReferenceKind rho) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorCode::AlphaOutOfRange, "alpha outside (0, 1)");
  require_same_shape(p_hat2.shape(), q_t.shape());
  const TreeShape shape = p_hat2.shape();
  const std::int32_t w = shape.row_width();
  const double uniform = 1.0 / w;
  std::vector<double> rows(p_hat2.raw().begin(), p_hat2.raw().end());
  for (std::int64_t r = 0; r < shape.prefix_count(); ++r) {
    double* row = rows.data() + static_cast<std::size_t>(r) * w;
    for (std::int32_t a = 0; a < w; ++a) {
      const double ref = rho == ReferenceKind::kUniform ? uniform : q_t.entry(r, a);
      if (row[a] != ref) row[a] = (1.0 - alpha) * row[a] + alpha * ref;
    }
  }
  return ModelState(shape, std::move(rows), /*floor=*/0.0);
}

namespace {

void require_positive(const ModelState& m, const char* name) {
  for (double v : m.raw()) {
    if (!(v > 0.0)) fail(ErrorCode::ZeroProbability, std::string(name) + " must be strictly positive");
  }
}

void tilt_row(std::span<const double> q, std::span<const double> p, double lambda,
              double* out) {
  const std::size_t w = q.size();
  double hi = -HUGE_VAL;
  for (std::size_t a = 0; a < w; ++a) {
    out[a] = (1.0 - lambda) * std::log(q[a]) + lambda * std::log(p[a]);
    hi = std::max(hi, out[a]);
  }
  double sum = 0.0;
  for (std::size_t a = 0; a < w; ++a) {
    out[a] = std::exp(out[a] - hi);
    sum += out[a];
  }
  for (std::size_t a = 0; a < w; ++a) out[a] /= sum;
}

}  // namespace

ModelState tilt_per_prefix(const ModelState& q_t, const ModelState& p_tilde2,
                           std::span<const double> lambdas) {
  require_same_shape(q_t.shape(), p_tilde2.shape());
  require_positive(q_t, "q_t");
  require_positive(p_tilde2, "p_tilde2");
  const TreeShape shape = q_t.shape();
  const std::int64_t n = shape.prefix_count();
  if (std::cmp_not_equal(lambdas.size(), n))
    fail(ErrorCode::ShapeMismatch, "one lambda per prefix required");
  const std::int32_t w = shape.row_width();
  std::vector<double> rows(static_cast<std::size_t>(n) * w);
  for (std::int64_t r = 0; r < n; ++r) {
    const double l = lambdas[static_cast<std::size_t>(r)];
    if (!(l >= 0.0 && l <= 1.0)) fail(ErrorCode::LambdaOutOfRange, "lambda outside [0, 1]");
    double* out = rows.data() + static_cast<std::size_t>(r) * w;
    if (l == 0.0) {
      std::copy_n(q_t.row(r).data(), w, out);
    } else if (l == 1.0) {
      std::copy_n(p_tilde2.row(r).data(), w, out);
    } else {
      tilt_row(q_t.row(r), p_tilde2.row(r), l, out);
    }
  }
  return ModelState(shape, std::move(rows), /*floor=*/0.0);
}

ModelState tilt(const ModelState& q_t, const ModelState& p_tilde2, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    fail(ErrorCode::LambdaOutOfRange, "lambda outside [0, 1]");
  const std::vector<double> lambdas(static_cast<std::size_t>(q_t.prefix_count()), lambda);
  return tilt_per_prefix(q_t, p_tilde2, lambdas);
}

double log_normalizer(const ModelState& q_t, const ModelState& p_tilde2, double lambda,
                      std::int64_t prefix_rank) {
  require_same_shape(q_t.shape(), p_tilde2.shape());
  if (!(lambda >= 0.0 && lambda <= 1.0))
    fail(ErrorCode::LambdaOutOfRange, "lambda outside [0, 1]");
  const auto q = q_t.row(prefix_rank);
  const auto p = p_tilde2.row(prefix_rank);
  double hi = -HUGE_VAL;
  std::vector<double> logs(q.size());
  for (std::size_t a = 0; a < q.size(); ++a) {
    logs[a] = (1.0 - lambda) * std::log(q[a]) + lambda * std::log(p[a]);
    hi = std::max(hi, logs[a]);
  }
  double sum = 0.0;
  for (double v : logs) sum += std::exp(v - hi);
  return hi + std::log(sum);
}

double measure_step_kl(const ModelState& q_t, const ModelState& q_next) {
  return kl_paths(q_t, q_next);
}

namespace {

struct PrefixShift {
  std::vector<double> s;    // centered log-shift of the true update
  std::vector<double> r_c;  // centered tilting direction
  double r_var = 0.0;       // E_{q_t}[r_c^2]
  double sr = 0.0;          // E_{q_t}[s r_c]
};

PrefixShift prefix_shift(const ModelState& q_t, const ModelState& q_next,
                         const ModelState& p_tilde2, std::int64_t rank) {
  const auto q = q_t.row(rank);
  const auto qn = q_next.row(rank);
  const auto p = p_tilde2.row(rank);
  const std::size_t w = q.size();
  PrefixShift out;
  out.s.resize(w);
  out.r_c.resize(w);
  double s_mean = 0.0;
  double r_mean = 0.0;
  for (std::size_t a = 0; a < w; ++a) {
    out.s[a] = std::log(qn[a] / q[a]);
    out.r_c[a] = std::log(p[a] / q[a]);
    s_mean += q[a] * out.s[a];
    r_mean += q[a] * out.r_c[a];
  }
  for (std::size_t a = 0; a < w; ++a) {
    out.s[a] -= s_mean;
    out.r_c[a] -= r_mean;
    out.r_var += q[a] * out.r_c[a] * out.r_c[a];
    out.sr += q[a] * out.s[a] * out.r_c[a];
  }
  return out;
}

}  // namespace

double effective_step(const ModelState& q_t, const ModelState& q_next,
                      const ModelState& p_tilde2, std::int64_t prefix_rank, double v0) {
  require_same_shape(q_t.shape(), q_next.shape());
  require_same_shape(q_t.shape(), p_tilde2.shape());
  const PrefixShift ps = prefix_shift(q_t, q_next, p_tilde2, prefix_rank);
  if (ps.r_var < v0)
    fail(ErrorCode::DegenerateDirection, "Var_{q_t}(r) below v0 at this prefix");
  return ps.sr / ps.r_var;
}

double tilt_residual_norm(const ModelState& q_t, const ModelState& q_next,
                          const ModelState& p_tilde2, std::int64_t prefix_rank,
                          double lambda) {
  const PrefixShift ps = prefix_shift(q_t, q_next, p_tilde2, prefix_rank);
  const auto q = q_t.row(prefix_rank);
  double acc = 0.0;
  for (std::size_t a = 0; a < ps.s.size(); ++a) {
    const double d = ps.s[a] - lambda * ps.r_c[a];
    acc += q[a] * d * d;
  }
  return std::sqrt(acc);
}

ModelState apply_log_shift(const ModelState& q, std::span<const double> shift_rows) {
  const TreeShape shape = q.shape();
  const std::int32_t w = shape.row_width();
  if (std::cmp_not_equal(shift_rows.size(), shape.prefix_count() * w))
    fail(ErrorCode::ShapeMismatch, "shift storage does not match table");
  std::vector<double> rows(static_cast<std::size_t>(shape.prefix_count()) * w);
  for (std::int64_t r = 0; r < shape.prefix_count(); ++r) {
    const double* shift = shift_rows.data() + static_cast<std::size_t>(r) * w;
    double* out = rows.data() + static_cast<std::size_t>(r) * w;
    const auto row = q.row(r);
    double sum = 0.0;
    for (std::int32_t a = 0; a < w; ++a) {
      out[a] = row[a] * std::exp(shift[a]);
      sum += out[a];
    }
    for (std::int32_t a = 0; a < w; ++a) out[a] /= sum;
  }
  return ModelState(shape, std::move(rows), /*floor=*/0.0);
}

ScheduleRun run_schedule(const ModelState& q0, const TokenTree& p_hat2,
                         const TiltingSchedule& schedule, const StepModulator& modulator) {
  schedule.validate();
  require_same_shape(q0.shape(), p_hat2.shape());
  const std::int64_t n = q0.prefix_count();

  ScheduleRun run;
  run.states.reserve(schedule.lambdas.size() + 1);
  run.states.push_back(q0);
  run.diagnostics.reserve(schedule.lambdas.size());

  for (double lambda_t : schedule.lambdas) {
    const ModelState& q_t = run.states.back();
    const ModelState p_tilde2 = smooth_target(p_hat2, q_t, schedule.alpha, schedule.reference);

    std::vector<double> weights;
    if (modulator) {
      weights = modulator(q_t, p_tilde2);
      if (std::cmp_not_equal(weights.size(), n))
        fail(ErrorCode::ShapeMismatch, "modulator must return one weight per prefix");
    } else {
      weights.assign(static_cast<std::size_t>(n), 1.0);
    }
    std::vector<double> applied(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
      applied[static_cast<std::size_t>(r)] =
          std::clamp(lambda_t * weights[static_cast<std::size_t>(r)], 0.0, 1.0);
    }

    ModelState q_next = tilt_per_prefix(q_t, p_tilde2, applied);

    StepDiagnostics diag;
    diag.effective_step.resize(static_cast<std::size_t>(n));
    diag.log_normalizer.resize(static_cast<std::size_t>(n));
    diag.residual_norm.resize(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
      const double applied_l = applied[static_cast<std::size_t>(r)];
      const PrefixShift ps = prefix_shift(q_t, q_next, p_tilde2, r);
      const double measured =
          ps.r_var >= kDegenerateDirectionVar ? ps.sr / ps.r_var : applied_l;
      diag.effective_step[static_cast<std::size_t>(r)] = measured;
      diag.log_normalizer[static_cast<std::size_t>(r)] =
          log_normalizer(q_t, p_tilde2, applied_l, r);
      diag.residual_norm[static_cast<std::size_t>(r)] =
          tilt_residual_norm(q_t, q_next, p_tilde2, r, measured);
    }
    diag.step_kl = measure_step_kl(q_t, q_next);
    run.diagnostics.push_back(std::move(diag));
    run.states.push_back(std::move(q_next));
  }
  return run;
}

}  // namespace tiltlab

#pragma once

/**
 * Numerical verification of the code-length lemmas and theorems.
 *
 * Everything is measured by exact enumeration on the truncated path space.
 * The first-order LEMMA is checked against the response-level tilt, where
 * Delta L(P) = -lambda E_P[f] + psi(lambda) is an exact identity and the
 * remainder after the quadratic term is genuinely cubic. The one-step and
 * multi-step THEOREM displays are checked on per-prefix tilt trajectories
 * (the update the engine actually runs), with constants C1, C2 estimated as
 * 99th-percentile quadratic remainders over a declared scenario family and
 * reused only within that family.
 */

#include <optional>
#include <string>
#include <vector>

#include "tiltlab/scenario.hpp"
#include "tiltlab/talr.hpp"
#include "tiltlab/tilting.hpp"
#include "tiltlab/token_tree.hpp"

namespace tiltlab {

constexpr double kBoundMarginTol = -1e-9;  // pass <=> margin >= this
constexpr double kLambdaSmallStepCap = 0.3;  // lambda_0

// ---------------------------------------------------------------------------
// Small regression helpers (shared with the acceptance suite).
// ---------------------------------------------------------------------------
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);
double loglog_slope(std::span<const double> x, std::span<const double> y);
// Slope of the best contiguous log-log window (>= 4 points, max R^2); robust
// to sign-cancellation roots inside the grid.
double power_law_slope(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Lemma checks
// ---------------------------------------------------------------------------

// |(E_P[f] - E_Q[f]) - (KL(P||Q) + KL(Q||P~2) - KL(P||P~2))| by enumeration.
double verify_kl_identity(const TokenTree& p, const ModelState& q, const ModelState& p_tilde2);

struct FirstOrderFit {
  double cubic_slope = 0.0;       // log-log slope of the quadratic remainder vs lambda
  double derivative_error = 0.0;  // symmetric-difference check at the smallest step
  std::vector<double> lambdas;
  std::vector<double> remainders;
};

// Response-level tilt of Q toward P~2 on the enumerated path space.
FirstOrderFit verify_first_order_lemma(const TokenTree& p, const ModelState& q,
                                       const ModelState& p_tilde2,
                                       std::span<const double> lambda_grid);

struct VarianceCheck {
  double worst_prefix_margin = 0.0;
  double aggregate_margin = 0.0;
  double aggregate_var = 0.0;   // prefix-mass-weighted mean of per-prefix Var
  double max_prefix_var = 0.0;
};

// Var_{q_t(.|u)}(f) <= w_u M_h^2 + (M_l + (beta+gamma) M_h)^2 per prefix, with
// w_u the measured hard mass of u, plus the mass-weighted aggregate form.
VarianceCheck verify_variance_bound(const GeneratedScenario& scenario, const ModelState& q_t,
                                    const ModelState& p_tilde2);

// ---------------------------------------------------------------------------
// First-order approximation law (per-prefix theorem)
// ---------------------------------------------------------------------------

struct LawPoint {
  double lambda = 0.0;
  double eps = 0.0;        // KL(q_t || q_next) at the prefix
  double residual = 0.0;   // full theorem residual incl. the constant part
  double s_norm_sq = 0.0;  // ||s||^2 at the prefix
  double effective = 0.0;  // recovered lambda_{t,u}
};

// Builds non-tilt "true updates" q_next ~ q * exp(lambda r + lambda^2 h) with
// a seeded centered direction h, realizing the theorem hypotheses, and
// measures residual and eps at `prefix_rank` across the lambda grid.
std::vector<LawPoint> first_order_law_points(const ModelState& q, const ModelState& p_tilde2,
                                             std::span<const double> lambda_grid,
                                             std::uint64_t seed, std::int64_t prefix_rank);

// Prefix with the largest Var_q(r): the non-degenerate place to measure.
std::int64_t best_law_prefix(const ModelState& q, const ModelState& p_tilde2);

// ---------------------------------------------------------------------------
// Theorem bound checks with family-estimated constants
// ---------------------------------------------------------------------------

struct BoundConstants {
  double c1 = 0.0;
  double c2 = 0.0;
  std::string family;
  int runs = 0;
};

// Stable descriptor of a scenario family (seed excluded).
std::string family_descriptor(const SparseShiftScenario& params);

// 99th-percentile quadratic remainders over >= 50 one-step runs.
BoundConstants estimate_constants(std::span<const GeneratedScenario> family,
                                  std::span<const double> lambda_grid, double alpha);

struct BoundCheck {
  std::string name;
  double measured = 0.0;
  double bound = 0.0;
  double margin = 0.0;  // bound - measured
  bool pass = false;
  bool degenerate = false;  // vanishing linear term, flagged rather than silent
};

struct BoundReport {
  std::vector<BoundCheck> checks;
  double delta_l_p1 = 0.0;
  double delta_l_p2 = 0.0;
  double h_t = 0.0;       // sup_t sqrt(chi^2(P1||Q_t))
  double mu_t = 0.0;      // inf_t KL(Q_t||P2)
  double lambda_sum = 0.0;
  double lambda_sq_sum = 0.0;
  bool chi2_blowup = false;  // chi^2 grew by >100x along the run

  bool all_pass() const;
};

BoundReport verify_one_step(const TokenTree& p1, const TokenTree& p2, const ModelState& q,
                            const ModelState& p_tilde2, double lambda,
                            const BoundConstants& constants, const std::string& family);

// Consumes a run_schedule trajectory. P2-side checks assume the unmodulated
// update; pass modulated=true to restrict to the (still valid) P1-side bound.
BoundReport verify_multi_step(const ScheduleRun& run, const GeneratedScenario& scenario,
                              const TiltingSchedule& schedule, const BoundConstants& constants,
                              bool modulated = false);

// ---------------------------------------------------------------------------
// Closed-form evaluators
// ---------------------------------------------------------------------------

// Lambda_T^min = (T/2C2)(mu - sqrt(mu^2 - 4 C2 Delta*/T)); InfeasibleT when the
// discriminant is negative; exact C2 -> 0 limit Delta*/mu.
double min_total_weight(double mu_t, double c2, double delta_star, std::int32_t steps);

// lambda_max = (-H V + sqrt((H V)^2 + 4 C1 eps_fg / T)) / (2 C1).
double lambda_max(double h_t, double v_s, double c1, double eps_fg, std::int32_t steps);

// V_s = sqrt(s M_h^2 + (m - s) M_e^2).
double v_s_formula(double s, double m, double m_h, double m_e);

// Fixed-target upper-bound expression A Δ*/mu + (A C2/mu^3 + C1/mu^2) Δ*^2/T.
double fixed_target_bound(double a, double mu_t, double c1, double c2, double delta_star,
                          std::int32_t steps);

// ---------------------------------------------------------------------------
// Frontier sweep and gain calibration
// ---------------------------------------------------------------------------

struct FrontierCell {
  double lambda = 0.0;
  std::int32_t steps = 0;
  bool talr = false;
  double domain_gain = 0.0;     // -Delta L_T(P2)
  double general_change = 0.0;  // -Delta L_T(P1)
  double mean_step_kl = 0.0;
  bool pareto = false;
  std::string status = "ok";
};

// One sweep cell; failures are captured in status, never thrown.
FrontierCell compute_frontier_cell(const GeneratedScenario& scenario, double lambda,
                                   std::int32_t steps, bool talr, double alpha,
                                   const TalrConfig& talr_cfg);

// Marks Pareto-optimal cells on the (domain_gain, general_change) plane.
void mark_pareto(std::vector<FrontierCell>& cells);

std::vector<FrontierCell> frontier_sweep(const GeneratedScenario& scenario,
                                         std::span<const double> lambdas,
                                         std::span<const std::int32_t> t_grid,
                                         bool include_talr, double alpha,
                                         const TalrConfig& talr_cfg);

// Equal-steps lambda achieving domain gain `target` within rel_tol (monotone
// bisection); InfeasibleParams when the gain is unreachable at lambda = 1.
double calibrate_lambda_for_gain(const GeneratedScenario& scenario, std::int32_t steps,
                                 double alpha, const StepModulator& modulator,
                                 double target_gain, double rel_tol);

// Domain gain / general change / mean step KL of one equal-steps run.
struct RunSummary {
  double domain_gain = 0.0;
  double general_change = 0.0;
  double mean_step_kl = 0.0;
};
RunSummary summarize_run(const GeneratedScenario& scenario, const ScheduleRun& run);

}  // namespace tiltlab

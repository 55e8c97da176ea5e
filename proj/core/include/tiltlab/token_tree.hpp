#pragma once

/**
 * Token trees and model states on a depth-truncated prefix space.
 *
 * A TokenTree holds, for every prefix u of length < depth, a conditional
 * probability vector over vocab ∪ {EOS}. The induced response distribution
 * lives on terminal outcomes: paths ending in EOS at some length < depth, or
 * cut at depth (mass reaching depth without EOS terminates there, so the path
 * distribution is always proper). A ModelState has the same shape but is
 * strictly positive: entries below the positivity floor are lifted by mixing
 * the offending row with uniform and renormalizing.
 *
 * Everything is immutable after construction; operations are pure and safe
 * for concurrent reads. All code lengths and divergences are in nats.
 */

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tiltlab/errors.hpp"

namespace tiltlab {

// A response: token indices in [0, vocab). Length < depth means the path is
// EOS-terminated; length == depth means it ends at the depth cut.
using Response = std::vector<std::int32_t>;

constexpr double kProbSumTol = 1e-12;
constexpr double kModelFloor = 1e-9;  // eta_q
constexpr std::int64_t kDefaultEnumerationBudget = 1000000;

// Reads TILTLAB_BUDGET if set, else the default.
std::int64_t enumeration_budget();

// ============================================================================
// Prefix indexing
// ============================================================================

// Prefixes are ranked level by level (root first), lexicographically within a
// level. Terminal outcomes are ranked as: EOS terminal of prefix rank r -> r,
// then depth-cut leaves in lexicographic order after all prefixes.
struct TreeShape {
  std::int32_t vocab = 0;
  std::int32_t depth = 0;

  bool operator==(const TreeShape&) const = default;

  std::int32_t row_width() const { return vocab + 1; }  // children + EOS
  std::int64_t level_offset(std::int32_t level) const;  // # prefixes shorter than level
  std::int64_t level_size(std::int32_t level) const;    // vocab^level
  std::int64_t prefix_count() const { return level_offset(depth); }
  std::int64_t terminal_count() const { return prefix_count() + level_size(depth); }

  // Child prefix rank of prefix `rank` (at `level`) extended by token a.
  std::int64_t child_rank(std::int64_t rank, std::int32_t level, std::int32_t a) const;
  std::int64_t rank_of(std::span<const std::int32_t> prefix) const;
  std::vector<std::int32_t> prefix_of_rank(std::int64_t rank) const;
  std::int32_t level_of_rank(std::int64_t rank) const;
};

// ============================================================================
// Conditional tables
// ============================================================================

// Shared storage: prefix_count rows of (vocab + 1) conditionals, EOS last.
class ConditionalTable {
 public:
  ConditionalTable() = default;
  ConditionalTable(TreeShape shape, std::vector<double> rows);

  const TreeShape& shape() const { return shape_; }
  std::int32_t vocab() const { return shape_.vocab; }
  std::int32_t depth() const { return shape_.depth; }
  std::int64_t prefix_count() const { return shape_.prefix_count(); }

  std::span<const double> row(std::int64_t prefix_rank) const {
    const auto w = static_cast<std::size_t>(shape_.row_width());
    return {rows_.data() + static_cast<std::size_t>(prefix_rank) * w, w};
  }
  double entry(std::int64_t prefix_rank, std::int32_t a) const {
    return rows_[static_cast<std::size_t>(prefix_rank) * shape_.row_width() + a];
  }
  std::span<const double> raw() const { return rows_; }

  // Mass reaching each prefix (root = 1); product of conditionals along u.
  std::vector<double> node_masses() const;
  // The induced response distribution over canonical terminal ranks.
  std::vector<double> terminal_masses() const;
  // log of the path probability of z (nats). Throws InvalidPath.
  double log_path_prob(const Response& z) const;

  std::string to_text() const;
  static ConditionalTable from_text(const std::string& text);

 protected:
  TreeShape shape_;
  std::vector<double> rows_;
};

// Data-distribution tree (Def. 1 semantics). Rows may contain zeros.
class TokenTree : public ConditionalTable {
 public:
  TokenTree(TreeShape shape, std::vector<double> rows);
  TokenTree(std::int32_t vocab, std::int32_t depth, std::vector<double> rows)
      : TokenTree(TreeShape{vocab, depth}, std::move(rows)) {}

  static TokenTree uniform(std::int32_t vocab, std::int32_t depth);
  static TokenTree from_text(const std::string& text);
};

// Strictly positive conditional model q(.|u). Rows whose minimum entry falls
// below `floor` are mixed with uniform and renormalized at construction.
class ModelState : public ConditionalTable {
 public:
  ModelState(TreeShape shape, std::vector<double> rows, double floor = kModelFloor);
  ModelState(std::int32_t vocab, std::int32_t depth, std::vector<double> rows,
             double floor = kModelFloor)
      : ModelState(TreeShape{vocab, depth}, std::move(rows), floor) {}

  static ModelState uniform(std::int32_t vocab, std::int32_t depth);
  static ModelState from_tree(const TokenTree& tree, double floor = kModelFloor);
  static ModelState from_text(const std::string& text);

  // 128-bit content hash of (shape, rows); identifies the coder model.
  std::array<std::uint64_t, 2> content_hash() const;
};

// ============================================================================
// Operations
// ============================================================================

struct PathEntry {
  Response tokens;
  double prob = 0.0;
};

// All positive-mass terminal paths, DFS order (EOS termination before
// descent). Throws BudgetExceeded when vocab^depth exceeds the budget.
std::vector<PathEntry> enumerate_paths(const ConditionalTable& tree,
                                       std::int64_t budget = enumeration_budget());

// H(P, Q) = E_{z~P}[-log Q(z)] in nats; equals the entropy of P's path
// distribution when Q matches it.
double expected_code_length(const TokenTree& p, const ModelState& q);

// Delta L(P) = KL(P||Q2) - KL(P||Q1). Computed by both the KL-difference and
// cross-entropy-difference routes and cross-checked to 1e-10.
double delta_code_length(const TokenTree& p, const ModelState& q1, const ModelState& q2);

enum class Divergence { kKl, kChiSquare, kEntropy };

// Divergence between two distributions given as aligned mass vectors.
// KL = sum p ln(p/q); chi^2 = sum p^2/q - 1; entropy = -sum p ln p (q ignored).
double divergence(Divergence kind, std::span<const double> p, std::span<const double> q);

// KL between the path distributions of two tables (exact, via chain rule).
double kl_paths(const ConditionalTable& p, const ConditionalTable& q);
double chi_square_paths(const ConditionalTable& p, const ConditionalTable& q);

// Count-weighted mixture tree: node masses obey
// mass(u) = sum_i count_i * mass_i(u) / sum_i count_i at every node.
TokenTree join_trees(std::span<const std::pair<TokenTree, double>> weighted_trees);

void require_same_shape(const TreeShape& a, const TreeShape& b);

}  // namespace tiltlab

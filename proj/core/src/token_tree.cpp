#include "tiltlab/token_tree.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <sstream>

namespace tiltlab {

namespace {

constexpr std::int64_t kMaxPrefixRows = 50000000;

void append_g17(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::int64_t enumeration_budget() {
  if (const char* env = std::getenv("TILTLAB_BUDGET")) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::int64_t>(v);
  }
  return kDefaultEnumerationBudget;
}

// ============================================================================
// TreeShape
// ============================================================================

std::int64_t TreeShape::level_size(std::int32_t level) const {
  std::int64_t n = 1;
  for (std::int32_t i = 0; i < level; ++i) {
    if (n > std::numeric_limits<std::int64_t>::max() / vocab)
      fail(ErrorCode::BudgetExceeded, "tree level size overflows");
    n *= vocab;
  }
  return n;
}

std::int64_t TreeShape::level_offset(std::int32_t level) const {
  std::int64_t total = 0;
  for (std::int32_t i = 0; i < level; ++i) total += level_size(i);
  return total;
}

std::int64_t TreeShape::child_rank(std::int64_t rank, std::int32_t level, std::int32_t a) const {
  const std::int64_t in_level = rank - level_offset(level);
  return level_offset(level + 1) + in_level * vocab + a;
}

std::int64_t TreeShape::rank_of(std::span<const std::int32_t> prefix) const {
  if (std::cmp_greater(prefix.size(), depth - 1))
    fail(ErrorCode::InvalidPath, "prefix longer than depth-1");
  std::int64_t in_level = 0;
  for (std::int32_t a : prefix) {
    if (a < 0 || a >= vocab) fail(ErrorCode::InvalidPath, "token index out of range");
    in_level = in_level * vocab + a;
  }
  return level_offset(static_cast<std::int32_t>(prefix.size())) + in_level;
}

std::int32_t TreeShape::level_of_rank(std::int64_t rank) const {
  for (std::int32_t l = 0; l < depth; ++l) {
    if (rank < level_offset(l + 1)) return l;
  }
  fail(ErrorCode::InvalidPath, "prefix rank out of range");
}

std::vector<std::int32_t> TreeShape::prefix_of_rank(std::int64_t rank) const {
  const std::int32_t level = level_of_rank(rank);
  std::int64_t in_level = rank - level_offset(level);
  std::vector<std::int32_t> prefix(level);
  for (std::int32_t i = level - 1; i >= 0; --i) {
    prefix[i] = static_cast<std::int32_t>(in_level % vocab);
    in_level /= vocab;
  }
  return prefix;
}

// ============================================================================
// ConditionalTable
// ============================================================================

ConditionalTable::ConditionalTable(TreeShape shape, std::vector<double> rows)
    : shape_(shape), rows_(std::move(rows)) {
  if (shape_.vocab < 1 || shape_.depth < 1)
    fail(ErrorCode::ShapeMismatch, "vocab and depth must be positive");
  const std::int64_t n = shape_.prefix_count();
  if (n > kMaxPrefixRows) fail(ErrorCode::BudgetExceeded, "prefix count exceeds storage cap");
  if (std::cmp_not_equal(rows_.size(), n * shape_.row_width()))
    fail(ErrorCode::ShapeMismatch, "row storage does not match prefix count");
  for (double v : rows_) {
    if (!std::isfinite(v) || v < 0.0)
      fail(ErrorCode::NanInput, "conditional entries must be finite and nonnegative");
  }
  const std::int32_t w = shape_.row_width();
  for (std::int64_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::int32_t a = 0; a < w; ++a) sum += rows_[r * w + a];
    if (std::fabs(sum - 1.0) > kProbSumTol)
      fail(ErrorCode::ShapeMismatch, "conditional row does not sum to 1");
  }
}

std::vector<double> ConditionalTable::node_masses() const {
  std::vector<double> mass(static_cast<std::size_t>(prefix_count()), 0.0);
  mass[0] = 1.0;
  for (std::int32_t level = 0; level + 1 < shape_.depth; ++level) {
    const std::int64_t lo = shape_.level_offset(level);
    const std::int64_t hi = shape_.level_offset(level + 1);
    for (std::int64_t r = lo; r < hi; ++r) {
      const double m = mass[static_cast<std::size_t>(r)];
      if (m == 0.0) continue;
      for (std::int32_t a = 0; a < shape_.vocab; ++a) {
        mass[static_cast<std::size_t>(shape_.child_rank(r, level, a))] = m * entry(r, a);
      }
    }
  }
  return mass;
}

std::vector<double> ConditionalTable::terminal_masses() const {
  const std::vector<double> mass = node_masses();
  const std::int64_t n = prefix_count();
  std::vector<double> out(static_cast<std::size_t>(shape_.terminal_count()), 0.0);
  for (std::int64_t r = 0; r < n; ++r) {
    out[static_cast<std::size_t>(r)] = mass[static_cast<std::size_t>(r)] * entry(r, shape_.vocab);
  }
  // Depth-cut leaves: children of last-level prefixes, lexicographic.
  const std::int64_t lo = shape_.level_offset(shape_.depth - 1);
  for (std::int64_t r = lo; r < n; ++r) {
    const double m = mass[static_cast<std::size_t>(r)];
    const std::int64_t base = n + (r - lo) * shape_.vocab;
    for (std::int32_t a = 0; a < shape_.vocab; ++a) {
      out[static_cast<std::size_t>(base + a)] = m * entry(r, a);
    }
  }
  return out;
}

double ConditionalTable::log_path_prob(const Response& z) const {
  if (std::cmp_greater(z.size(), shape_.depth)) fail(ErrorCode::InvalidPath, "response overlength");
  double lp = 0.0;
  std::int64_t rank = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] < 0 || z[i] >= shape_.vocab)
      fail(ErrorCode::InvalidPath, "token index out of range");
    lp += std::log(entry(rank, z[i]));
    if (i + 1 < static_cast<std::size_t>(shape_.depth))
      rank = shape_.child_rank(rank, static_cast<std::int32_t>(i), z[i]);
  }
  if (std::cmp_less(z.size(), shape_.depth)) lp += std::log(entry(rank, shape_.vocab));
  return lp;
}

std::string ConditionalTable::to_text() const {
  std::string out = "vocab=" + std::to_string(shape_.vocab) +
                    " depth=" + std::to_string(shape_.depth) + "\n";
  const std::int64_t n = prefix_count();
  for (std::int64_t r = 0; r < n; ++r) {
    const auto prefix = shape_.prefix_of_rank(r);
    if (prefix.empty()) {
      out += "root";
    } else {
      for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(prefix[i]);
      }
    }
    out += ':';
    for (std::int32_t a = 0; a < shape_.row_width(); ++a) {
      out += ' ';
      append_g17(out, entry(r, a));
    }
    out += '\n';
  }
  return out;
}

ConditionalTable ConditionalTable::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::IoError, "empty tree text");
  TreeShape shape;
  if (std::sscanf(line.c_str(), "vocab=%d depth=%d", &shape.vocab, &shape.depth) != 2)
    fail(ErrorCode::IoError, "bad tree header: " + line);
  if (shape.vocab < 1 || shape.depth < 1) fail(ErrorCode::IoError, "bad tree dimensions");
  const std::int64_t n = shape.prefix_count();
  std::vector<double> rows(static_cast<std::size_t>(n * shape.row_width()),
                           std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) fail(ErrorCode::IoError, "bad tree line: " + line);
    const std::string head = line.substr(0, colon);
    std::vector<std::int32_t> prefix;
    if (head != "root") {
      std::istringstream hs(head);
      std::string tok;
      while (std::getline(hs, tok, ',')) prefix.push_back(std::stoi(tok));
    }
    const std::int64_t rank = shape.rank_of(prefix);
    std::istringstream vs(line.substr(colon + 1));
    for (std::int32_t a = 0; a < shape.row_width(); ++a) {
      if (!(vs >> rows[static_cast<std::size_t>(rank) * shape.row_width() + a]))
        fail(ErrorCode::IoError, "short probability row: " + line);
    }
    seen[static_cast<std::size_t>(rank)] = true;
  }
  for (std::int64_t r = 0; r < n; ++r) {
    if (!seen[static_cast<std::size_t>(r)])
      fail(ErrorCode::IoError, "missing prefix row at rank " + std::to_string(r));
  }
  return ConditionalTable(shape, std::move(rows));
}

// ============================================================================
// TokenTree / ModelState
// ============================================================================

TokenTree::TokenTree(TreeShape shape, std::vector<double> rows)
    : ConditionalTable(shape, std::move(rows)) {}

TokenTree TokenTree::uniform(std::int32_t vocab, std::int32_t depth) {
  const TreeShape shape{vocab, depth};
  const double u = 1.0 / shape.row_width();
  return TokenTree(shape,
                   std::vector<double>(static_cast<std::size_t>(shape.prefix_count()) *
                                           shape.row_width(),
                                       u));
}

TokenTree TokenTree::from_text(const std::string& text) {
  ConditionalTable t = ConditionalTable::from_text(text);
  std::vector<double> rows(t.raw().begin(), t.raw().end());
  return TokenTree(t.shape(), std::move(rows));
}

namespace {

// Rows violating the floor are mixed with uniform; compliant rows are left
// bit-identical so tilt boundary cases stay exact.
std::vector<double> apply_row_floor(const TreeShape& shape, std::vector<double> rows,
                                    double floor) {
  if (floor <= 0.0) return rows;
  const std::int32_t w = shape.row_width();
  const double eps = floor * w;
  for (std::int64_t r = 0; r < shape.prefix_count(); ++r) {
    double* row = rows.data() + static_cast<std::size_t>(r) * w;
    double lo = row[0];
    for (std::int32_t a = 1; a < w; ++a) lo = std::min(lo, row[a]);
    if (lo >= floor) continue;
    double sum = 0.0;
    for (std::int32_t a = 0; a < w; ++a) {
      row[a] = (1.0 - eps) * row[a] + floor;
      sum += row[a];
    }
    for (std::int32_t a = 0; a < w; ++a) row[a] /= sum;
  }
  return rows;
}

}  // namespace

ModelState::ModelState(TreeShape shape, std::vector<double> rows, double floor)
    : ConditionalTable(shape, apply_row_floor(shape, std::move(rows), floor)) {}

ModelState ModelState::uniform(std::int32_t vocab, std::int32_t depth) {
  const TreeShape shape{vocab, depth};
  const double u = 1.0 / shape.row_width();
  return ModelState(shape,
                    std::vector<double>(static_cast<std::size_t>(shape.prefix_count()) *
                                            shape.row_width(),
                                        u));
}

ModelState ModelState::from_tree(const TokenTree& tree, double floor) {
  std::vector<double> rows(tree.raw().begin(), tree.raw().end());
  return ModelState(tree.shape(), std::move(rows), floor);
}

ModelState ModelState::from_text(const std::string& text) {
  ConditionalTable t = ConditionalTable::from_text(text);
  std::vector<double> rows(t.raw().begin(), t.raw().end());
  return ModelState(t.shape(), std::move(rows));
}

std::array<std::uint64_t, 2> ModelState::content_hash() const {
  std::array<std::int32_t, 2> dims{shape_.vocab, shape_.depth};
  std::span<const unsigned char> dim_bytes{reinterpret_cast<const unsigned char*>(dims.data()),
                                           sizeof(dims)};
  std::span<const unsigned char> row_bytes{reinterpret_cast<const unsigned char*>(rows_.data()),
                                           rows_.size() * sizeof(double)};
  std::uint64_t h0 = fnv1a64(row_bytes, fnv1a64(dim_bytes, 0xcbf29ce484222325ULL));
  std::uint64_t h1 = fnv1a64(row_bytes, fnv1a64(dim_bytes, 0x9ae16a3b2f90404fULL));
  return {h0, h1};
}

// ============================================================================
// Operations
// ============================================================================

void require_same_shape(const TreeShape& a, const TreeShape& b) {
  if (!(a == b)) fail(ErrorCode::ShapeMismatch, "trees differ in vocab or depth");
}

namespace {

void enumerate_rec(const ConditionalTable& tree, std::int64_t rank, std::int32_t level,
                   double mass, Response& tokens, std::vector<PathEntry>& out) {
  if (level == tree.depth()) {
    if (mass > 0.0) out.push_back({tokens, mass});
    return;
  }
  const double eos_mass = mass * tree.entry(rank, tree.vocab());
  if (eos_mass > 0.0) out.push_back({tokens, eos_mass});
  for (std::int32_t a = 0; a < tree.vocab(); ++a) {
    const double m = mass * tree.entry(rank, a);
    if (m == 0.0) continue;
    tokens.push_back(a);
    const std::int64_t child =
        level + 1 < tree.depth() ? tree.shape().child_rank(rank, level, a) : -1;
    enumerate_rec(tree, child, level + 1, m, tokens, out);
    tokens.pop_back();
  }
}

}  // namespace

std::vector<PathEntry> enumerate_paths(const ConditionalTable& tree, std::int64_t budget) {
  if (tree.shape().level_size(tree.depth()) > budget)
    fail(ErrorCode::BudgetExceeded, "vocab^depth exceeds the enumeration budget");
  std::vector<PathEntry> out;
  Response tokens;
  enumerate_rec(tree, 0, 0, 1.0, tokens, out);
  return out;
}

double expected_code_length(const TokenTree& p, const ModelState& q) {
  require_same_shape(p.shape(), q.shape());
  const std::vector<double> mass = p.node_masses();
  double h = 0.0;
  for (std::int64_t r = 0; r < p.prefix_count(); ++r) {
    const double m = mass[static_cast<std::size_t>(r)];
    if (m == 0.0) continue;
    for (std::int32_t a = 0; a < p.shape().row_width(); ++a) {
      const double pa = p.entry(r, a);
      if (pa == 0.0) continue;
      h -= m * pa * std::log(q.entry(r, a));
    }
  }
  return h;
}

double kl_paths(const ConditionalTable& p, const ConditionalTable& q) {
  require_same_shape(p.shape(), q.shape());
  const std::vector<double> mass = p.node_masses();
  double kl = 0.0;
  for (std::int64_t r = 0; r < p.prefix_count(); ++r) {
    const double m = mass[static_cast<std::size_t>(r)];
    if (m == 0.0) continue;
    for (std::int32_t a = 0; a < p.shape().row_width(); ++a) {
      const double pa = p.entry(r, a);
      if (pa == 0.0) continue;
      const double qa = q.entry(r, a);
      if (qa == 0.0) fail(ErrorCode::SupportViolation, "q vanishes on p's support");
      kl += m * pa * std::log(pa / qa);
    }
  }
  return kl;
}

double chi_square_paths(const ConditionalTable& p, const ConditionalTable& q) {
  require_same_shape(p.shape(), q.shape());
  return divergence(Divergence::kChiSquare, p.terminal_masses(), q.terminal_masses());
}

double divergence(Divergence kind, std::span<const double> p, std::span<const double> q) {
  if (kind != Divergence::kEntropy && p.size() != q.size())
    fail(ErrorCode::ShapeMismatch, "distribution sizes differ");
  double acc = 0.0;
  switch (kind) {
    case Divergence::kKl:
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) fail(ErrorCode::SupportViolation, "q vanishes on p's support");
        acc += p[i] * std::log(p[i] / q[i]);
      }
      return acc;
    case Divergence::kChiSquare:
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) fail(ErrorCode::SupportViolation, "q vanishes on p's support");
        acc += p[i] * p[i] / q[i];
      }
      return acc - 1.0;
    case Divergence::kEntropy:
      for (double v : p) {
        if (v > 0.0) acc -= v * std::log(v);
      }
      return acc;
  }
  fail(ErrorCode::InvalidConfig, "unknown divergence kind");
}

double delta_code_length(const TokenTree& p, const ModelState& q1, const ModelState& q2) {
  require_same_shape(p.shape(), q1.shape());
  require_same_shape(p.shape(), q2.shape());
  const double via_kl = kl_paths(p, q2) - kl_paths(p, q1);
  const double via_ce = expected_code_length(p, q2) - expected_code_length(p, q1);
  if (std::fabs(via_kl - via_ce) > 1e-10)
    throw std::logic_error("delta_code_length: dual-route disagreement beyond 1e-10");
  return via_kl;
}

TokenTree join_trees(std::span<const std::pair<TokenTree, double>> weighted_trees) {
  if (weighted_trees.empty()) fail(ErrorCode::EmptyInput, "no trees to join");
  const TreeShape shape = weighted_trees.front().first.shape();
  double total = 0.0;
  for (const auto& [tree, count] : weighted_trees) {
    require_same_shape(shape, tree.shape());
    if (!(count > 0.0)) fail(ErrorCode::EmptyInput, "dataset counts must be positive");
    total += count;
  }

  const std::int64_t n = shape.prefix_count();
  const std::int32_t w = shape.row_width();
  std::vector<double> joint_mass(static_cast<std::size_t>(n), 0.0);
  std::vector<double> rows(static_cast<std::size_t>(n) * w, 0.0);
  std::vector<std::vector<double>> masses;
  masses.reserve(weighted_trees.size());
  for (const auto& [tree, count] : weighted_trees) masses.push_back(tree.node_masses());

  for (std::int64_t r = 0; r < n; ++r) {
    double m = 0.0;
    for (std::size_t i = 0; i < weighted_trees.size(); ++i) {
      m += weighted_trees[i].second * masses[i][static_cast<std::size_t>(r)];
    }
    joint_mass[static_cast<std::size_t>(r)] = m / total;
    double* row = rows.data() + static_cast<std::size_t>(r) * w;
    if (m == 0.0) {
      // Unreachable prefix in every constituent: any valid row works.
      std::fill(row, row + w, 1.0 / w);
      continue;
    }
    for (std::int32_t a = 0; a < w; ++a) {
      double num = 0.0;
      for (std::size_t i = 0; i < weighted_trees.size(); ++i) {
        num += weighted_trees[i].second * masses[i][static_cast<std::size_t>(r)] *
               weighted_trees[i].first.entry(r, a);
      }
      row[a] = num / m;
    }
    double sum = 0.0;
    for (std::int32_t a = 0; a < w; ++a) sum += row[a];
    for (std::int32_t a = 0; a < w; ++a) row[a] /= sum;
  }
  return TokenTree(shape, std::move(rows));
}

}  // namespace tiltlab

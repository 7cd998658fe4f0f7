#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "specseg/affinity.hpp"
#include "specseg/error.hpp"
#include "specseg/spectral.hpp"
#include "specseg/types.hpp"

namespace specseg {

/// cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V), with side A where mask is 1.
inline double ncut_value(const AffinityGraph& g, std::span<const std::uint8_t> in_a) {
  const auto n = static_cast<Eigen::Index>(g.size());
  if (in_a.size() != g.size())
    throw Error(Errc::DimensionMismatch, "mask has " + std::to_string(in_a.size()) + " entries for " +
                                             std::to_string(g.size()) + " nodes");
  double cut = 0.0;
  double assoc_a = 0.0;
  double assoc_b = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (in_a[static_cast<std::size_t>(j)]) {
      assoc_a += g.degrees(j);
      continue;
    }
    assoc_b += g.degrees(j);
    for (Eigen::Index i = 0; i < n; ++i)
      if (in_a[static_cast<std::size_t>(i)]) cut += g.weights(i, j);
  }
  if (assoc_a == 0.0 && assoc_b == 0.0) throw Error(Errc::EmptySide, "graph is empty");
  const bool a_empty = std::none_of(in_a.begin(), in_a.end(), [](std::uint8_t v) { return v != 0; });
  const bool b_empty = std::all_of(in_a.begin(), in_a.end(), [](std::uint8_t v) { return v != 0; });
  if (a_empty || b_empty) throw Error(Errc::EmptySide, "both sides of a bipartition must be nonempty");
  return cut / assoc_a + cut / assoc_b;
}

struct Split {
  std::vector<std::uint8_t> in_a;  // 1 where x_i <= threshold
  double cost = 0.0;
  double threshold = 0.0;
  std::size_t threshold_index = 0;  // 0-based among the l candidates
};

/// The l candidate thresholds, evenly spaced strictly inside (min x, max x).
inline std::vector<double> split_thresholds(const Eigen::VectorXd& x, std::size_t l) {
  const double lo = x.minCoeff();
  const double hi = x.maxCoeff();
  std::vector<double> out(l);
  for (std::size_t i = 0; i < l; ++i)
    out[i] = lo + (hi - lo) * static_cast<double>(i + 1) / static_cast<double>(l + 1);
  return out;
}

/// Minimum-NCut split among the level sets {x <= s} over l evenly spaced
/// thresholds. Candidates leaving fewer than `min_size` nodes on a side are
/// skipped; ties go to the smallest threshold index. Returns nullopt when no
/// candidate separates the graph.
inline std::optional<Split> best_split(const AffinityGraph& g, const Eigen::VectorXd& x, std::size_t l,
                                       std::size_t min_size) {
  if (l < 2) throw Error(Errc::InvalidArgument, "need at least two split points");
  if (static_cast<std::size_t>(x.size()) != g.size()) throw Error(Errc::DimensionMismatch, "vector/graph size mismatch");
  const std::size_t n = g.size();
  if (n < 2) return std::nullopt;
  min_size = std::max<std::size_t>(min_size, 1);

  // The level sets are nested, so cut and assoc are updated as nodes cross
  // the threshold. Candidates within rounding of the minimum are then scored
  // exactly with ncut_value.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x(static_cast<Eigen::Index>(a)) < x(static_cast<Eigen::Index>(b));
  });
  const auto thresholds = split_thresholds(x, l);
  const double total = g.degrees.sum();
  Eigen::VectorXd in_a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd in_b = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
  double cut = 0.0, assoc_a = 0.0, moved = 0.0;
  std::size_t count_a = 0;
  std::vector<double> approx(l, std::numeric_limits<double>::infinity()), error(l, 0.0);
  std::vector<std::size_t> counts(l, 0);
  for (std::size_t t = 0; t < l; ++t) {
    for (; count_a < n && x(static_cast<Eigen::Index>(order[count_a])) <= thresholds[t]; ++count_a) {
      const auto k = static_cast<Eigen::Index>(order[count_a]);
      in_b(k) = 0.0;
      const double to_a = g.weights.col(k).dot(in_a);
      const double to_b = g.weights.col(k).dot(in_b);
      cut += to_b - to_a;
      moved += to_a + to_b;
      assoc_a += g.degrees(k);
      in_a(k) = 1.0;
    }
    counts[t] = count_a;
    if (count_a < min_size || n - count_a < min_size) continue;
    const double assoc_b = total - assoc_a;
    approx[t] = cut / assoc_a + cut / assoc_b;
    // Generous bound on the rounding in the running sums.
    const double eps = std::numeric_limits<double>::epsilon();
    error[t] = 4.0 * static_cast<double>(n + 2) * eps * (moved * (1.0 / assoc_a + 1.0 / assoc_b) + approx[t]);
  }
  double ceiling = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < l; ++t) ceiling = std::min(ceiling, approx[t] + error[t]);
  if (!std::isfinite(ceiling)) return std::nullopt;

  std::optional<Split> best;
  std::vector<std::uint8_t> mask(n);
  std::size_t scored = n + 1;  // count of the last exactly scored mask
  double scored_cost = 0.0;
  for (std::size_t t = 0; t < l; ++t) {
    if (!(approx[t] - error[t] <= ceiling)) continue;
    if (counts[t] != scored) {
      for (std::size_t i = 0; i < n; ++i) mask[i] = x(static_cast<Eigen::Index>(i)) <= thresholds[t] ? 1 : 0;
      scored = counts[t];
      scored_cost = ncut_value(g, mask);
    }
    if (!best || scored_cost < best->cost) best = Split{mask, scored_cost, thresholds[t], t};
  }
  return best;
}

enum class StopReason { CostAboveTau, TooSmall, NoValidSplit };

constexpr std::string_view to_string(StopReason r) noexcept {
  switch (r) {
    case StopReason::CostAboveTau: return "cost_above_tau";
    case StopReason::TooSmall: return "too_small";
    case StopReason::NoValidSplit: return "no_valid_split";
  }
  return "unknown";
}

struct PartitionNode {
  std::vector<std::size_t> node_ids;  // flat patch indices, ascending
  std::optional<double> split_cost;   // accepted split (internal nodes)
  std::optional<double> candidate_cost;  // rejected best split (leaves)
  std::vector<std::size_t> children;  // 0 or 2 indices into PartitionTree::nodes
  std::optional<StopReason> stop_reason;

  bool is_leaf() const noexcept { return children.empty(); }
};

/// Recursion record; nodes[0] is the root, children follow depth-first with
/// the side holding the lowest patch index first.
struct PartitionTree {
  std::vector<PartitionNode> nodes;

  std::vector<std::size_t> leaves() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].is_leaf()) out.push_back(i);
    return out;
  }
};

struct NcutOptions {
  double tau = 0.5;
  int alpha = 10;
  std::size_t splits = 32;
  std::size_t min_size = 2;
  bool clamp = true;
  SpectralOptions spectral{};
};

struct NcutResult {
  SegmentationMap segmentation;
  PartitionTree tree;
};

namespace detail {

// Affinities within this distance of 1 are treated as identical patches; such
// a segment has no distinguishable bipartition.
inline constexpr double kIndistinctAffinity = 1e-12;

inline bool all_indistinct(const AffinityGraph& g) {
  return (g.weights.array() >= 1.0 - kIndistinctAffinity).all();
}

class RecursiveCut {
 public:
  RecursiveCut(const NcutOptions& options, PartitionTree& tree) : options_(options), tree_(tree) {}

  void run(const AffinityGraph& g, std::size_t node) {
    const std::size_t n = g.size();
    if (n < 2 * std::max<std::size_t>(options_.min_size, 1)) {
      tree_.nodes[node].stop_reason = StopReason::TooSmall;
      return;
    }
    if (all_indistinct(g)) {
      tree_.nodes[node].stop_reason = StopReason::NoValidSplit;
      return;
    }
    const EigenPair f = fiedler(g, options_.spectral);
    const auto split = best_split(g, f.vector, options_.splits, options_.min_size);
    if (!split) {
      tree_.nodes[node].stop_reason = StopReason::NoValidSplit;
      return;
    }
    if (split->cost > options_.tau) {
      tree_.nodes[node].candidate_cost = split->cost;
      tree_.nodes[node].stop_reason = StopReason::CostAboveTau;
      return;
    }

    std::vector<std::size_t> side_a, side_b;
    for (std::size_t i = 0; i < n; ++i) (split->in_a[i] ? side_a : side_b).push_back(i);
    // node_ids are ascending, so local index 0 holds the lowest patch id.
    if (split->in_a[0] == 0) std::swap(side_a, side_b);

    tree_.nodes[node].split_cost = split->cost;
    for (const auto* side : {&side_a, &side_b}) {
      AffinityGraph child = subgraph(g, *side);
      const std::size_t index = tree_.nodes.size();
      tree_.nodes[node].children.push_back(index);
      tree_.nodes.push_back(PartitionNode{child.node_ids, {}, {}, {}, {}});
      run(child, index);
    }
  }

 private:
  const NcutOptions& options_;
  PartitionTree& tree_;
};

}  // namespace detail

/// Recursive two-way normalized cut on a prebuilt graph over a
/// `height x width` patch grid.
inline NcutResult recursive_ncut(const AffinityGraph& g, std::size_t height, std::size_t width,
                                 const NcutOptions& options) {
  if (g.size() != height * width) throw Error(Errc::DimensionMismatch, "graph size does not match the patch grid");
  if (!(options.tau >= 0.0)) throw Error(Errc::InvalidArgument, "tau must be nonnegative");
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.node_ids[i] != i) throw Error(Errc::InvalidArgument, "graph must cover the full grid in index order");

  NcutResult result;
  result.tree.nodes.push_back(PartitionNode{g.node_ids, {}, {}, {}, {}});
  detail::RecursiveCut(options, result.tree).run(g, 0);

  auto& seg = result.segmentation;
  seg.height = height;
  seg.width = width;
  seg.labels.assign(g.size(), -1);
  std::vector<int> leaf_of(g.size(), -1);
  const auto leaves = result.tree.leaves();
  for (std::size_t li = 0; li < leaves.size(); ++li)
    for (std::size_t id : result.tree.nodes[leaves[li]].node_ids) leaf_of[id] = static_cast<int>(li);
  seg.labels = leaf_of;
  seg.num_segments = renumber_by_first_occurrence(seg.labels);
  return result;
}

inline NcutResult recursive_ncut(const FeatureMap& fm, const NcutOptions& options = {}) {
  const AffinityGraph g = build_affinity(fm, AffinityOptions{options.alpha, options.clamp});
  return recursive_ncut(g, fm.height(), fm.width(), options);
}

}  // namespace specseg

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specseg/error.hpp"
#include "specseg/types.hpp"

namespace specseg {

/// Dense symmetric patch-affinity graph with its degree vector.
/// `node_ids[i]` is the flat patch index (in the full feature map) of node i.
struct AffinityGraph {
  Eigen::MatrixXd weights;
  Eigen::VectorXd degrees;
  std::vector<std::size_t> node_ids;

  std::size_t size() const noexcept { return node_ids.size(); }
};

struct AffinityOptions {
  int alpha = 10;
  /// Clamp cosines to [0, 1] before exponentiation. Off reproduces the raw
  /// power of the cosine, which can be negative for odd exponents.
  bool clamp = true;
};

/// x^n for a positive integer n by repeated squaring.
inline double integer_power(double x, int n) noexcept {
  double result = 1.0;
  while (n > 0) {
    if (n & 1) result *= x;
    x *= x;
    n >>= 1;
  }
  return result;
}

inline Eigen::VectorXd compute_degrees(const Eigen::MatrixXd& weights) {
  // W is symmetric, so column sums are the row sums.
  return weights.colwise().sum().transpose();
}

/// Rows of the returned matrix are the unit-normalised patch embeddings.
inline Eigen::MatrixXd normalized_patches(const FeatureMap& fm) {
  const auto n = static_cast<Eigen::Index>(fm.num_patches());
  const auto dim = static_cast<Eigen::Index>(fm.dim());
  Eigen::MatrixXd z(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto p = fm.patch(static_cast<std::size_t>(i));
    double sq = 0.0;
    for (float v : p) sq += static_cast<double>(v) * static_cast<double>(v);
    if (sq == 0.0) throw Error(Errc::ZeroNormPatch, "patch " + std::to_string(i) + " is the zero vector");
    const double norm = std::sqrt(sq);
    for (Eigen::Index c = 0; c < dim; ++c) z(i, c) = static_cast<double>(p[static_cast<std::size_t>(c)]) / norm;
  }
  return z;
}

/// W_ij = clamp(cos(z_i, z_j), 0, 1)^alpha with unit self-affinity.
inline AffinityGraph build_affinity(const FeatureMap& fm, const AffinityOptions& options = {}) {
  if (options.alpha < 1) throw Error(Errc::InvalidArgument, "alpha must be >= 1");
  const Eigen::MatrixXd z = normalized_patches(fm);
  const Eigen::Index n = z.rows();

  // Lower triangle only, then mirrored, so W is bit-symmetric.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  w.selfadjointView<Eigen::Lower>().rankUpdate(z);
  for (Eigen::Index j = 0; j < n; ++j) {
    w(j, j) = 1.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double c = w(i, j);
      // Rounding can leave identical directions a few ulps short of 1.
      if (c > 1.0 - 1e-12 && z.row(i) == z.row(j)) c = 1.0;
      c = options.clamp ? std::clamp(c, 0.0, 1.0) : std::clamp(c, -1.0, 1.0);
      c = integer_power(c, options.alpha);
      w(i, j) = c;
      w(j, i) = c;
    }
  }

  AffinityGraph g;
  g.weights = std::move(w);
  g.degrees = compute_degrees(g.weights);
  g.node_ids.resize(static_cast<std::size_t>(n));
  std::iota(g.node_ids.begin(), g.node_ids.end(), std::size_t{0});
  return g;
}

inline AffinityGraph build_affinity(const FeatureMap& fm, int alpha) {
  return build_affinity(fm, AffinityOptions{alpha, true});
}

/// Graph restricted to `nodes` (local indices into g). Degrees are
/// recomputed from the restricted weights; node_ids keep the original ids.
inline AffinityGraph subgraph(const AffinityGraph& g, std::span<const std::size_t> nodes) {
  if (nodes.empty()) throw Error(Errc::EmptySubset, "subgraph needs at least one node");
  std::vector<char> seen(g.size(), 0);
  for (std::size_t v : nodes) {
    if (v >= g.size())
      throw Error(Errc::IndexOutOfRange, "node " + std::to_string(v) + " >= " + std::to_string(g.size()));
    if (seen[v]) throw Error(Errc::InvalidArgument, "node " + std::to_string(v) + " listed twice");
    seen[v] = 1;
  }

  const auto m = static_cast<Eigen::Index>(nodes.size());
  AffinityGraph sub;
  // Runs of consecutive ids are copied as contiguous blocks.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> runs;  // (source start, length)
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto id = static_cast<Eigen::Index>(nodes[i]);
    if (!runs.empty() && runs.back().first + runs.back().second == id)
      ++runs.back().second;
    else
      runs.emplace_back(id, 1);
  }
  sub.weights.resize(m, m);
  Eigen::Index col = 0;
  for (const auto& [cstart, clen] : runs) {
    Eigen::Index row = 0;
    for (const auto& [rstart, rlen] : runs) {
      sub.weights.block(row, col, rlen, clen) = g.weights.block(rstart, cstart, rlen, clen);
      row += rlen;
    }
    col += clen;
  }
  sub.degrees = compute_degrees(sub.weights);
  sub.node_ids.reserve(nodes.size());
  for (std::size_t v : nodes) sub.node_ids.push_back(g.node_ids[v]);
  return sub;
}

}  // namespace specseg

#pragma once

// Fixtures and brute-force reference implementations shared by the unit and
// acceptance tests. The references deliberately avoid the library's code
// paths: they recompute from raw weights, enumerate, or call a different
// Eigen solver.

#include <Eigen/Dense>

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "specseg/specseg.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using specseg::AffinityGraph;
using specseg::FeatureMap;

// ---------------------------------------------------------------------------
// Fixtures

inline AffinityGraph graph_from_weights(const Eigen::MatrixXd& w) {
  AffinityGraph g;
  g.weights = w;
  g.degrees = w.rowwise().sum();
  g.node_ids.resize(static_cast<std::size_t>(w.rows()));
  std::iota(g.node_ids.begin(), g.node_ids.end(), std::size_t{0});
  return g;
}

/// Symmetric weights in [0, 1) with unit diagonal.
inline Eigen::MatrixXd random_weights(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd w(n, n);
  for (int i = 0; i < n; ++i) {
    w(i, i) = 1.0;
    for (int j = 0; j < i; ++j) w(i, j) = w(j, i) = u(rng);
  }
  return w;
}

/// Random weights inside each block, zero across blocks.
inline Eigen::MatrixXd block_weights(std::mt19937_64& rng, const std::vector<int>& block_of) {
  const int n = static_cast<int>(block_of.size());
  Eigen::MatrixXd w = random_weights(rng, n);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) w(i, j) = w(j, i) = block_of[static_cast<std::size_t>(i)] == block_of[static_cast<std::size_t>(j)] ? u(rng) : 0.0;
  return w;
}

inline FeatureMap random_features(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t d) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> data(h * w * d);
  for (auto& v : data) v = n(rng);
  return FeatureMap(h, w, d, std::move(data));
}

/// Patch i gets basis vector e_{labels[i]} plus Gaussian noise.
inline FeatureMap planted_features(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t d,
                                   const std::vector<int>& labels, float noise) {
  std::normal_distribution<float> n(0.0f, noise);
  std::vector<float> data(h * w * d);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < d; ++c)
      data[i * d + c] = (static_cast<int>(c) == labels[i] ? 1.0f : 0.0f) + (noise > 0 ? n(rng) : 0.0f);
  return FeatureMap(h, w, d, std::move(data));
}

/// Uniformly random block ids in [0, k), each block holding at least `min_count` patches.
inline std::vector<int> random_blocks(std::mt19937_64& rng, std::size_t n, int k, std::size_t min_count = 2) {
  std::uniform_int_distribution<int> pick(0, k - 1);
  while (true) {
    std::vector<int> labels(n);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (auto& l : labels) ++counts[static_cast<std::size_t>(l = pick(rng))];
    if (*std::min_element(counts.begin(), counts.end()) >= min_count) return labels;
  }
}

/// Unit vectors with prescribed pairwise cosines: group centres
/// sqrt(inter) * e0 + sqrt(1 - inter) * e_{g+1}, plus a within-group spread
/// giving intra-group cosine approximately `intra`.
inline FeatureMap cosine_groups(std::mt19937_64& rng, std::size_t h, std::size_t w, const std::vector<int>& labels,
                                int groups, double intra, double inter) {
  const std::size_t d = static_cast<std::size_t>(groups) + 1 + h * w;
  std::vector<float> data(h * w * d, 0.0f);
  const double spread = std::sqrt(1.0 - intra);
  const double core = std::sqrt(intra);
  std::normal_distribution<double> jitter(0.0, 1e-3);
  for (std::size_t i = 0; i < h * w; ++i) {
    auto* p = data.data() + i * d;
    p[0] = static_cast<float>(core * std::sqrt(inter));
    p[1 + static_cast<std::size_t>(labels[i])] = static_cast<float>(core * std::sqrt(1.0 - inter));
    p[static_cast<std::size_t>(groups) + 1 + i] = static_cast<float>(spread * (1.0 + jitter(rng)));
  }
  return FeatureMap(h, w, d, std::move(data));
}

inline std::vector<int> canonical(std::vector<int> labels) {
  specseg::renumber_by_first_occurrence(labels);
  return labels;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("specseg-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Reference implementations

/// Direct double-sum cut/assoc from the raw weights.
inline double brute_ncut(const Eigen::MatrixXd& w, const std::vector<std::uint8_t>& in_a) {
  double cut = 0.0, assoc_a = 0.0, assoc_b = 0.0;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const bool ai = in_a[static_cast<std::size_t>(i)] != 0, aj = in_a[static_cast<std::size_t>(j)] != 0;
      if (ai && !aj) cut += w(i, j);
      (ai ? assoc_a : assoc_b) += w(i, j);
    }
  return cut / assoc_a + cut / assoc_b;
}

/// Smallest cost over every nontrivial bipartition (n <= ~16).
inline double min_bipartition_cost(const Eigen::MatrixXd& w) {
  const auto n = static_cast<std::size_t>(w.rows());
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> mask(n);
  for (std::uint64_t bits = 1; bits + 1 < (std::uint64_t{1} << n); ++bits) {
    for (std::size_t i = 0; i < n; ++i) mask[i] = (bits >> i) & 1u;
    best = std::min(best, brute_ncut(w, mask));
  }
  return best;
}

struct DenseSpectrum {
  Eigen::VectorXd values;   // ascending
  Eigen::MatrixXd vectors;  // D-orthonormal columns
};

/// Generalized problem (D - W) x = lambda D x via Eigen's Cholesky-based
/// generalized solver (independent of the library's L_sym route).
inline DenseSpectrum dense_generalized(const Eigen::MatrixXd& w) {
  const Eigen::VectorXd d = w.rowwise().sum();
  const Eigen::MatrixXd dm = d.asDiagonal();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(dm - w, dm);
  return {solver.eigenvalues(), solver.eigenvectors()};
}

/// Minimum over all n! column permutations of a square matrix, summed in row order.
inline double brute_assignment(const Eigen::MatrixXd& cost) {
  std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) total += cost(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Pair-counting AUC with half credit for ties.
inline double mann_whitney(const std::vector<double>& scores, const std::vector<std::uint8_t>& targets) {
  double wins = 0.0, pos = 0.0, neg = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) (targets[i] ? pos : neg) += 1.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!targets[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (targets[j]) continue;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / (pos * neg);
}

inline double pixel_accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace testsupport

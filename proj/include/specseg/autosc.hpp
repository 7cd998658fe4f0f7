#pragma once

// Baselines: automatic spectral clustering (eigen-gap model selection with
// column-pivoted QR assignment) and k-means on normalised patch features.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "specseg/affinity.hpp"
#include "specseg/error.hpp"
#include "specseg/spectral.hpp"
#include "specseg/types.hpp"

namespace specseg {

inline constexpr double kEigenGapEpsilon = 1e-12;

struct EigenGap {
  int k = 1;
  std::vector<double> gaps;  // gaps[k - 1] for k = 1..k_max
};

/// gap(k) = (l_{k+1} - l_k) / (l_{k+1} + eps) over 1-based ascending
/// eigenvalues; returns the first k attaining the maximum.
inline EigenGap relative_eigen_gap(std::span<const double> eigenvalues, std::size_t k_max) {
  if (k_max < 1) throw Error(Errc::InvalidArgument, "k_max must be >= 1");
  if (eigenvalues.size() < k_max + 1)
    throw Error(Errc::TooFewEigenvalues, std::to_string(eigenvalues.size()) + " eigenvalues for k_max " +
                                             std::to_string(k_max));
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    if (eigenvalues[i] < -1e-9) throw Error(Errc::InvalidArgument, "negative eigenvalue");
    if (i > 0 && eigenvalues[i] < eigenvalues[i - 1]) throw Error(Errc::InvalidArgument, "eigenvalues not ascending");
  }
  EigenGap out;
  out.gaps.resize(k_max);
  for (std::size_t k = 1; k <= k_max; ++k) {
    const double lo = eigenvalues[k - 1];
    const double hi = eigenvalues[k];
    out.gaps[k - 1] = (hi - lo) / (hi + kEigenGapEpsilon);
    if (out.gaps[k - 1] > out.gaps[static_cast<std::size_t>(out.k) - 1]) out.k = static_cast<int>(k);
  }
  return out;
}

struct EigenGapReport {
  int alpha_chosen = 1;
  int k_chosen = 1;
  std::vector<double> gaps;  // for alpha_chosen
  std::vector<int> alphas;
  std::vector<std::vector<double>> spectra;  // one per entry of `alphas`
  std::vector<double> best_gap_per_alpha;
};

inline const std::vector<int> kDefaultAlphaSet{1, 5, 10, 15};

namespace detail {

/// Gaps of two exponents closer than this are treated as a tie.
inline constexpr double kGapTieTolerance = 1e-12;

struct AlphaSelection {
  EigenGapReport report;
  std::vector<EigenPair> pairs;  // eigenpairs for alpha_chosen
};

inline AlphaSelection select_alpha_impl(const FeatureMap& fm, std::span<const int> alpha_set, std::size_t k_max,
                                        const SpectralOptions& spectral) {
  if (alpha_set.empty()) throw Error(Errc::InvalidArgument, "empty exponent set");
  const std::size_t n = fm.num_patches();
  if (n < 2) throw Error(Errc::TooFewEigenvalues, "a single patch has no eigen-gap");
  const std::size_t kk = std::min(k_max, n - 1);

  AlphaSelection best;
  double best_gap = -1.0;
  for (int alpha : alpha_set) {
    const AffinityGraph g = build_affinity(fm, AffinityOptions{alpha, true});
    auto pairs = smallest_eigenpairs(g, kk + 1, spectral);
    std::vector<double> spectrum;
    for (const auto& p : pairs) spectrum.push_back(p.value);
    const EigenGap gap = relative_eigen_gap(spectrum, kk);
    const double top = gap.gaps[static_cast<std::size_t>(gap.k) - 1];

    best.report.alphas.push_back(alpha);
    best.report.spectra.push_back(spectrum);
    best.report.best_gap_per_alpha.push_back(top);
    if (top > best_gap + kGapTieTolerance) {
      best_gap = top;
      best.report.alpha_chosen = alpha;
      best.report.k_chosen = gap.k;
      best.report.gaps = gap.gaps;
      best.pairs = std::move(pairs);
    }
  }
  return best;
}

}  // namespace detail

/// Picks the exponent (and cluster count) with the globally largest relative
/// eigen-gap. Ties go to the earlier exponent in the set.
inline EigenGapReport select_alpha(const FeatureMap& fm, std::span<const int> alpha_set = kDefaultAlphaSet,
                                   std::size_t k_max = 32, const SpectralOptions& spectral = {}) {
  return detail::select_alpha_impl(fm, alpha_set, k_max, spectral).report;
}

/// k-way assignment from the n x k block of smallest eigenvectors: anchors
/// are the columns picked by pivoted QR of U^T; node i goes to the anchor j
/// maximising |(U U_C^{-1})_ij|. Labels are renumbered by first occurrence.
inline std::vector<int> cpqr_kway(const Eigen::MatrixXd& u) {
  const Eigen::Index n = u.rows();
  const Eigen::Index k = u.cols();
  if (k < 1 || n < k) throw Error(Errc::InvalidArgument, "eigenvector block must be n x k with 1 <= k <= n");
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  if (k == 1) return labels;

  const Eigen::MatrixXd ut = u.transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(ut);
  const auto& perm = qr.colsPermutation().indices();
  Eigen::MatrixXd anchors(k, k);
  for (Eigen::Index j = 0; j < k; ++j) anchors.row(j) = u.row(perm(j));

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(anchors);
  const auto& sv = svd.singularValues();
  if (sv(k - 1) <= 1e-10 * sv(0)) throw Error(Errc::SingularAnchors, "anchor block is numerically singular");

  // B = U * anchors^{-1}, via anchors^T B^T = U^T.
  const Eigen::MatrixXd b = anchors.transpose().partialPivLu().solve(ut).transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < k; ++j)
      if (std::abs(b(i, j)) > std::abs(b(i, arg))) arg = j;
    labels[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  renumber_by_first_occurrence(labels);
  return labels;
}

struct AutoScResult {
  SegmentationMap segmentation;
  EigenGapReport report;
};

inline AutoScResult autosc_segment(const FeatureMap& fm, std::span<const int> alpha_set = kDefaultAlphaSet,
                                   std::size_t k_max = 32, const SpectralOptions& spectral = {}) {
  auto selection = detail::select_alpha_impl(fm, alpha_set, k_max, spectral);
  const auto k = static_cast<Eigen::Index>(selection.report.k_chosen);
  const auto n = static_cast<Eigen::Index>(fm.num_patches());
  Eigen::MatrixXd u(n, k);
  for (Eigen::Index j = 0; j < k; ++j) u.col(j) = selection.pairs[static_cast<std::size_t>(j)].vector;

  AutoScResult out;
  out.report = std::move(selection.report);
  out.segmentation.height = fm.height();
  out.segmentation.width = fm.width();
  out.segmentation.labels = cpqr_kway(u);
  out.segmentation.num_segments =
      1 + *std::max_element(out.segmentation.labels.begin(), out.segmentation.labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  SegmentationMap segmentation;
  Eigen::MatrixXd centroids;   // k x D, in normalised feature space
  std::vector<double> inertia;  // after each assignment step
  int iterations = 0;
};

struct KMeansOptions {
  int max_iterations = 100;
  double shift_tolerance = 1e-6;
};

namespace detail {

/// Uniform double in [0, 1) from the raw 64-bit engine output, so results do
/// not depend on the standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double assign_nearest(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centroids, std::vector<int>& labels) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int arg = 0;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d = (x.row(i) - centroids.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    labels[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

}  // namespace detail

/// k-means++ seeding then Lloyd iterations on L2-normalised patch features.
inline KMeansResult kmeans_cluster(const FeatureMap& fm, std::size_t k, std::uint64_t seed,
                                   const KMeansOptions& options = {}) {
  const Eigen::MatrixXd x = normalized_patches(fm);
  const Eigen::Index n = x.rows();
  if (k == 0) throw Error(Errc::InvalidArgument, "k must be >= 1");
  if (k > static_cast<std::size_t>(n))
    throw Error(Errc::KTooLarge, "k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " patches");
  const auto kk = static_cast<Eigen::Index>(k);

  std::mt19937_64 rng(seed);
  Eigen::MatrixXd centroids(kk, x.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Eigen::Index first = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n));
  centroids.row(0) = x.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;
  Eigen::VectorXd nearest(n);
  for (Eigen::Index i = 0; i < n; ++i) nearest(i) = (x.row(i) - centroids.row(0)).squaredNorm();

  for (Eigen::Index c = 1; c < kk; ++c) {
    const double total = nearest.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      const double target = detail::unit_uniform(rng) * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += nearest(i);
        if (nearest(i) > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick < 0)  // rounding at the tail
        for (Eigen::Index i = n - 1; i >= 0 && pick < 0; --i)
          if (nearest(i) > 0.0) pick = i;
    } else {
      for (Eigen::Index i = 0; i < n && pick < 0; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
    }
    chosen[static_cast<std::size_t>(pick)] = 1;
    centroids.row(c) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) nearest(i) = std::min(nearest(i), (x.row(i) - centroids.row(c)).squaredNorm());
  }

  KMeansResult out;
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    out.inertia.push_back(detail::assign_nearest(x, centroids, labels));
    out.iterations = iter + 1;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(kk, x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    double shift = 0.0;
    for (Eigen::Index c = 0; c < kk; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;  // empty cluster keeps its centroid
      const Eigen::RowVectorXd updated = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      shift = std::max(shift, (updated - centroids.row(c)).norm());
      centroids.row(c) = updated;
    }
    if (shift < options.shift_tolerance) break;
  }
  // Final labels against the final centroids.
  out.inertia.push_back(detail::assign_nearest(x, centroids, labels));

  out.centroids = std::move(centroids);
  out.segmentation.height = fm.height();
  out.segmentation.width = fm.width();
  out.segmentation.labels = std::move(labels);
  out.segmentation.num_segments = renumber_by_first_occurrence(out.segmentation.labels);
  return out;
}

}  // namespace specseg

#pragma once

// Generalized eigenproblem (D - W) x = lambda D x on an affinity graph.
//
// Both solvers work on the symmetric normalized Laplacian
//   L = I - D^{-1/2} W D^{-1/2},
// whose eigenpairs (lambda, v) map back through x = D^{-1/2} v. The null
// vector D^{1/2} 1 is known analytically and is deflated, never searched for.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "specseg/affinity.hpp"
#include "specseg/error.hpp"

namespace specseg {

/// Eigenpair of (D - W) x = lambda D x, normalised so that sum_i d_i x_i^2 = 1
/// and with its largest-magnitude entry positive.
struct EigenPair {
  double value = 0.0;
  Eigen::VectorXd vector;
};

struct SpectralOptions {
  /// Residual contract: ||(D-W)x - lambda D x||_inf <= tolerance * max(1, ||Dx||_inf).
  double tolerance = 1e-8;
  /// Graphs with at most this many nodes use a dense full decomposition.
  std::size_t dense_limit = 256;
  /// Iterative solver budget, in operator applications per node.
  std::size_t budget_factor = 10;
};

/// Infinity norm of the generalized residual, and the scale it is compared to.
struct Residual {
  double norm = 0.0;
  double scale = 1.0;
};

inline Residual generalized_residual(const AffinityGraph& g, const EigenPair& p) {
  const Eigen::VectorXd dx = g.degrees.cwiseProduct(p.vector);
  const Eigen::VectorXd r = dx - g.weights * p.vector - p.value * dx;
  return {r.lpNorm<Eigen::Infinity>(), std::max(1.0, dx.lpNorm<Eigen::Infinity>())};
}

namespace detail {

/// L = I - D^{-1/2} W D^{-1/2}, applied through W.
struct NormalizedLaplacian {
  const Eigen::MatrixXd& w;
  Eigen::VectorXd sqrt_d;
  Eigen::VectorXd inv_sqrt_d;
  Eigen::VectorXd null_vector;

  explicit NormalizedLaplacian(const AffinityGraph& g) : w(g.weights) {
    const auto n = static_cast<Eigen::Index>(g.size());
    if (g.weights.rows() != n || g.weights.cols() != n || g.degrees.size() != n)
      throw Error(Errc::InvalidArgument, "inconsistent affinity graph dimensions");
    for (Eigen::Index i = 0; i < n; ++i)
      if (!(g.degrees(i) > 0.0))
        throw Error(Errc::InvalidArgument, "node " + std::to_string(i) + " has nonpositive degree");
    sqrt_d = g.degrees.cwiseSqrt();
    inv_sqrt_d = sqrt_d.cwiseInverse();
    null_vector = sqrt_d / sqrt_d.norm();
  }

  Eigen::Index size() const { return w.rows(); }

  /// L * X for a block of vectors.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd y = inv_sqrt_d.asDiagonal() * x;
    // W is symmetric; the transposed product runs much faster for thin blocks.
    Eigen::MatrixXd wy(y.cols(), y.rows());
    wy.noalias() = y.transpose() * w;
    return x - inv_sqrt_d.asDiagonal() * wy.transpose();
  }

  /// Dense L. s_i * s_j is commutative, so the result is exactly symmetric.
  Eigen::MatrixXd dense() const {
    const Eigen::Index n = size();
    Eigen::MatrixXd l(n, n);
    for (Eigen::Index j = 0; j < n; ++j) l.col(j) = -w.col(j).cwiseProduct(inv_sqrt_d * inv_sqrt_d(j));
    l.diagonal().array() += 1.0;
    return l;
  }
};

/// A generalized eigenpair with its residual, sharing one product with W.
struct CheckedPair {
  EigenPair pair;
  Residual residual;

  bool meets(double tolerance) const { return residual.norm <= tolerance * residual.scale; }
};

inline CheckedPair to_generalized(const AffinityGraph& g, const NormalizedLaplacian& op, const Eigen::VectorXd& v,
                                  bool is_null) {
  EigenPair p;
  p.vector = op.inv_sqrt_d.cwiseProduct(v);
  const double dnorm = std::sqrt(g.degrees.dot(p.vector.cwiseAbs2()));
  p.vector /= dnorm;

  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < p.vector.size(); ++i) {
    if (std::abs(p.vector(i)) > best) {
      best = std::abs(p.vector(i));
      arg = i;
    }
  }
  if (p.vector(arg) < 0.0) p.vector = -p.vector;

  const Eigen::VectorXd dx = g.degrees.cwiseProduct(p.vector);
  const Eigen::VectorXd wx = g.weights * p.vector;
  // Rayleigh quotient x^T (D - W) x with x^T D x = 1.
  if (!is_null) p.value = std::clamp(p.vector.dot(dx - wx), 0.0, 2.0);
  const Eigen::VectorXd r = dx - wx - p.value * dx;
  return {std::move(p), {r.lpNorm<Eigen::Infinity>(), std::max(1.0, dx.lpNorm<Eigen::Infinity>())}};
}

/// Deterministic pseudo-random start directions (the first is an index ramp).
class StartVectors {
 public:
  explicit StartVectors(Eigen::Index n) : n_(n), rng_(0x9E3779B97F4A7C15ull) {}

  Eigen::VectorXd next() {
    Eigen::VectorXd v(n_);
    if (produced_++ == 0) {
      for (Eigen::Index i = 0; i < n_; ++i) v(i) = static_cast<double>(i);
    } else {
      for (Eigen::Index i = 0; i < n_; ++i) v(i) = static_cast<double>(rng_() >> 11) * 0x1.0p-53 - 0.5;
    }
    return v;
  }

 private:
  Eigen::Index n_;
  std::mt19937_64 rng_;
  int produced_ = 0;
};

inline std::vector<CheckedPair> solve_dense(const AffinityGraph& g, const NormalizedLaplacian& op, std::size_t want) {
  // P L P with P = I - u u^T, expanded into rank-one terms; then the null
  // direction u is lifted above the spectrum (which lies in [0, 2]).
  const Eigen::VectorXd& u = op.null_vector;
  Eigen::MatrixXd a = op.dense();
  const Eigen::VectorXd lu = a * u;
  const double ulu = u.dot(lu);
  a -= u * lu.transpose() + lu * u.transpose();
  a += (ulu + 3.0) * u * u.transpose();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw Error(Errc::ConvergenceFailure, "dense eigensolver failed");

  std::vector<CheckedPair> out;
  for (std::size_t i = 0; i < want; ++i)
    out.push_back(to_generalized(g, op, es.eigenvectors().col(static_cast<Eigen::Index>(i)), false));
  return out;
}

/// Block Krylov expansion with full reorthogonalisation and Rayleigh-Ritz
/// extraction; the next block is the residuals of the current Ritz pairs.
inline std::vector<CheckedPair> solve_iterative(const AffinityGraph& g, const NormalizedLaplacian& op,
                                              std::size_t want, const SpectralOptions& options) {
  const Eigen::Index n = op.size();
  const Eigen::Index space = n - 1;  // complement of the null vector
  const auto wanted = static_cast<Eigen::Index>(want);
  const Eigen::Index block = std::min<Eigen::Index>(space, std::max<Eigen::Index>(wanted, 4));
  const auto budget = static_cast<Eigen::Index>(options.budget_factor) * n;
  // Ritz residual target; the generalized contract is checked explicitly.
  const double ritz_target = 1e-2 * options.tolerance / std::sqrt(op.sqrt_d.cwiseAbs2().maxCoeff());

  Eigen::MatrixXd basis(n, space);
  Eigen::MatrixXd image(n, space);  // L * basis
  Eigen::MatrixXd projected(space, space);
  Eigen::Index m = 0;
  Eigen::Index applications = 0;
  StartVectors fresh(n);

  // Orthonormalise `c` against the null vector and the current basis and
  // append it. Returns false if it is numerically dependent.
  auto append = [&](Eigen::VectorXd c) {
    const double before = c.norm();
    if (before == 0.0) return false;
    for (int pass = 0; pass < 2; ++pass) {
      c -= op.null_vector * op.null_vector.dot(c);
      if (m > 0) c -= basis.leftCols(m) * (basis.leftCols(m).transpose() * c);
    }
    const double after = c.norm();
    if (after <= 1e-10 * before) return false;
    basis.col(m++) = c / after;
    return true;
  };

  std::vector<Eigen::VectorXd> candidates;
  for (Eigen::Index j = 0; j < block; ++j) candidates.push_back(fresh.next());

  std::vector<CheckedPair> result;
  while (true) {
    const Eigen::Index first = m;
    for (auto& c : candidates) {
      if (m >= space) break;
      if (append(c)) continue;
      for (int attempt = 0; attempt < 8 && m < space; ++attempt)
        if (append(fresh.next())) break;
    }
    const Eigen::Index added = m - first;
    if (added == 0) throw Error(Errc::ConvergenceFailure, "Krylov expansion stalled");

    image.middleCols(first, added) = op.apply(basis.middleCols(first, added));
    applications += added;
    projected.block(0, first, m, added) = basis.leftCols(m).transpose() * image.middleCols(first, added);
    projected.block(first, 0, added, first) = projected.block(0, first, first, added).transpose();
    projected.block(first, first, added, added) =
        0.5 * (projected.block(first, first, added, added) +
               projected.block(first, first, added, added).transpose()).eval();

    if (m < wanted) {
      candidates.clear();
      for (Eigen::Index j = 0; j < added; ++j) candidates.push_back(image.col(first + j));
      continue;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(projected.topLeftCorner(m, m));
    if (es.info() != Eigen::Success) throw Error(Errc::ConvergenceFailure, "projected eigensolver failed");

    const Eigen::Index tracked = std::min(m, std::max(wanted, block));
    const Eigen::MatrixXd ritz = basis.leftCols(m) * es.eigenvectors().leftCols(tracked);
    const Eigen::MatrixXd residuals =
        image.leftCols(m) * es.eigenvectors().leftCols(tracked) - ritz * es.eigenvalues().head(tracked).asDiagonal();

    bool converged = true;
    for (Eigen::Index i = 0; i < wanted; ++i) converged = converged && residuals.col(i).norm() <= ritz_target;

    const bool exhausted = m >= space || applications + block > budget;
    if (converged || exhausted) {
      result.clear();
      bool ok = true;
      for (Eigen::Index i = 0; i < wanted; ++i) {
        result.push_back(to_generalized(g, op, ritz.col(i), false));
        ok = ok && result.back().meets(options.tolerance);
      }
      if (ok) return result;
      if (exhausted)
        throw Error(Errc::ConvergenceFailure, "residual tolerance not reached within " + std::to_string(budget) +
                                                  " operator applications");
    }

    candidates.clear();
    for (Eigen::Index i = 0; i < tracked && static_cast<Eigen::Index>(candidates.size()) < block; ++i)
      candidates.push_back(residuals.col(i));
  }
}

/// The k smallest pairs; with `skip_null` the trivial first pair is omitted
/// from the result.
inline std::vector<EigenPair> solve(const AffinityGraph& g, std::size_t k, const SpectralOptions& options,
                                    bool skip_null = false) {
  const std::size_t n = g.size();
  if (k < 1 || k > n)
    throw Error(Errc::InvalidArgument, "requested " + std::to_string(k) + " eigenpairs of a " + std::to_string(n) +
                                           "-node graph");
  const NormalizedLaplacian op(g);
  std::vector<CheckedPair> checked;
  if (k > 1)
    checked = n <= options.dense_limit ? solve_dense(g, op, k - 1) : solve_iterative(g, op, k - 1, options);
  std::stable_sort(checked.begin(), checked.end(),
                   [](const CheckedPair& a, const CheckedPair& b) { return a.pair.value < b.pair.value; });
  if (!skip_null) checked.insert(checked.begin(), to_generalized(g, op, op.null_vector, true));
  std::vector<EigenPair> out;
  for (auto& c : checked) {
    if (!c.meets(options.tolerance))
      throw Error(Errc::ConvergenceFailure,
                  "eigenpair residual " + std::to_string(c.residual.norm) + " exceeds tolerance");
    out.push_back(std::move(c.pair));
  }
  return out;
}

}  // namespace detail

/// k eigenpairs with the smallest eigenvalues, ascending. The first is always
/// the trivial pair (0, D-constant vector).
inline std::vector<EigenPair> smallest_eigenpairs(const AffinityGraph& g, std::size_t k,
                                                  const SpectralOptions& options = {}) {
  return detail::solve(g, k, options);
}

/// Eigenpair of the second smallest generalized eigenvalue.
inline EigenPair fiedler(const AffinityGraph& g, const SpectralOptions& options = {}) {
  if (g.size() < 2) throw Error(Errc::InvalidArgument, "the Fiedler vector needs at least two nodes");
  auto pairs = detail::solve(g, 2, options, true);
  return std::move(pairs[0]);
}

}  // namespace specseg

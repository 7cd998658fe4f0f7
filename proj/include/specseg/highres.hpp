#pragma once

// Lifting patch-grid segmentations to pixel resolution.
//
// Grid resampling uses the half-pixel-center convention throughout: output
// pixel `dst` samples source coordinate (dst + 0.5) * src / dst - 0.5,
// clamped to [0, src - 1].

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "specseg/error.hpp"
#include "specseg/types.hpp"

namespace specseg {

/// One embedding per segment: the mean feature over the segment's patches.
struct ConceptBank {
  Eigen::MatrixXd embeddings;  // K x D
  std::vector<int> source_labels;

  int count() const noexcept { return static_cast<int>(embeddings.rows()); }
};

inline ConceptBank masked_smm(const FeatureMap& fm, const SegmentationMap& seg) {
  if (seg.height != fm.height() || seg.width != fm.width() || seg.labels.size() != fm.num_patches())
    throw Error(Errc::DimensionMismatch, "segmentation and feature map grids differ");
  const auto k = static_cast<Eigen::Index>(seg.num_segments);
  const auto dim = static_cast<Eigen::Index>(fm.dim());
  ConceptBank bank;
  bank.embeddings = Eigen::MatrixXd::Zero(k, dim);
  std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    const int l = seg.labels[i];
    if (l < 0 || l >= seg.num_segments) throw Error(Errc::IndexOutOfRange, "label outside [0, K)");
    auto p = fm.patch(i);
    for (Eigen::Index c = 0; c < dim; ++c) bank.embeddings(l, c) += static_cast<double>(p[static_cast<std::size_t>(c)]);
    ++counts[static_cast<std::size_t>(l)];
  }
  for (Eigen::Index l = 0; l < k; ++l) {
    if (counts[static_cast<std::size_t>(l)] == 0)
      throw Error(Errc::InvalidArgument, "segment " + std::to_string(l) + " has no patches");
    bank.embeddings.row(l) /= static_cast<double>(counts[static_cast<std::size_t>(l)]);
    if (bank.embeddings.row(l).squaredNorm() == 0.0)
      throw Error(Errc::ZeroNormPatch, "concept " + std::to_string(l) + " has zero norm");
    bank.source_labels.push_back(static_cast<int>(l));
  }
  return bank;
}

namespace detail {

/// Two source taps and the weight of the second one.
struct LinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double w_hi = 0.0;
};

inline std::vector<LinearTap> linear_taps(std::size_t src, std::size_t dst) {
  std::vector<LinearTap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double s = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    taps[i] = {lo, std::min(lo + 1, src - 1), s - static_cast<double>(lo)};
  }
  return taps;
}

/// Index of the nearest source center; exact ties go to the lower index.
inline std::size_t nearest_source(std::size_t dst_index, std::size_t src, std::size_t dst) {
  // s = (2*dst_index + 1) * src / (2*dst) - 0.5; nearest = ceil(s - 0.5).
  const std::size_t num = (2 * dst_index + 1) * src;
  const std::size_t den = 2 * dst;
  const std::size_t ceil_ratio = (num + den - 1) / den;
  return std::min(ceil_ratio == 0 ? 0 : ceil_ratio - 1, src - 1);
}

inline void check_output_size(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw Error(Errc::InvalidArgument, "output dimensions must be positive");
}

}  // namespace detail

inline FeatureMap bilinear_upsample(const FeatureMap& fm, std::size_t out_h, std::size_t out_w) {
  detail::check_output_size(out_h, out_w);
  const auto ty = detail::linear_taps(fm.height(), out_h);
  const auto tx = detail::linear_taps(fm.width(), out_w);
  const std::size_t dim = fm.dim();
  std::vector<float> out(out_h * out_w * dim);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double wy = ty[y].w_hi;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double wx = tx[x].w_hi;
      const auto a = fm.patch(ty[y].lo * fm.width() + tx[x].lo);
      const auto b = fm.patch(ty[y].lo * fm.width() + tx[x].hi);
      const auto c = fm.patch(ty[y].hi * fm.width() + tx[x].lo);
      const auto d = fm.patch(ty[y].hi * fm.width() + tx[x].hi);
      float* o = out.data() + (y * out_w + x) * dim;
      for (std::size_t ch = 0; ch < dim; ++ch) {
        const double top = (1.0 - wx) * a[ch] + wx * b[ch];
        const double bottom = (1.0 - wx) * c[ch] + wx * d[ch];
        o[ch] = static_cast<float>((1.0 - wy) * top + wy * bottom);
      }
    }
  }
  return FeatureMap(out_h, out_w, dim, std::move(out));
}

inline HiResSegmentation nearest_upsample(const SegmentationMap& seg, std::size_t out_h, std::size_t out_w) {
  detail::check_output_size(out_h, out_w);
  HiResSegmentation out{out_h, out_w, std::vector<int>(out_h * out_w), seg.num_segments};
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = detail::nearest_source(y, seg.height, out_h);
    for (std::size_t x = 0; x < out_w; ++x)
      out.labels[y * out_w + x] = seg.labels[sy * seg.width + detail::nearest_source(x, seg.width, out_w)];
  }
  return out;
}

namespace detail {

inline int argmax_cosine(const Eigen::VectorXd& dots, const Eigen::VectorXd& concept_norms, double pixel_norm) {
  int arg = 0;
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < dots.size(); ++k) {
    const double c = dots(k) / (pixel_norm * concept_norms(k));
    if (c > best) {
      best = c;
      arg = static_cast<int>(k);
    }
  }
  return arg;
}

}  // namespace detail

/// Per pixel, the concept with the highest cosine similarity (ties to the
/// lower index). A zero pixel vector takes the label of the nearest patch in
/// `fallback` when given, and raises ZeroNormPixel otherwise.
inline HiResSegmentation assign_concepts(const FeatureMap& fm_up, const ConceptBank& bank,
                                         const SegmentationMap* fallback = nullptr) {
  if (static_cast<Eigen::Index>(fm_up.dim()) != bank.embeddings.cols())
    throw Error(Errc::DimensionMismatch, "feature and concept dimensions differ");
  const Eigen::VectorXd concept_norms = bank.embeddings.rowwise().norm();
  HiResSegmentation out{fm_up.height(), fm_up.width(), std::vector<int>(fm_up.num_patches()), bank.count()};
  Eigen::VectorXd v(static_cast<Eigen::Index>(fm_up.dim()));
  for (std::size_t i = 0; i < fm_up.num_patches(); ++i) {
    const auto p = fm_up.patch(i);
    for (std::size_t c = 0; c < p.size(); ++c) v(static_cast<Eigen::Index>(c)) = p[c];
    const double norm = v.norm();
    if (norm == 0.0) {
      if (!fallback) throw Error(Errc::ZeroNormPixel, "pixel " + std::to_string(i) + " has a zero feature vector");
      const std::size_t y = i / out.width, x = i % out.width;
      out.labels[i] = fallback->labels[detail::nearest_source(y, fallback->height, out.height) * fallback->width +
                                       detail::nearest_source(x, fallback->width, out.width)];
      continue;
    }
    out.labels[i] = detail::argmax_cosine(bank.embeddings * v, concept_norms, norm);
  }
  return out;
}

/// assign_concepts(bilinear_upsample(fm, out_h, out_w), bank) without
/// materialising the upsampled tensor: the interpolation is linear, so dot
/// products and norms follow from patch-level inner products.
inline HiResSegmentation assign_concepts_upsampled(const FeatureMap& fm, const ConceptBank& bank,
                                                   const SegmentationMap& seg, std::size_t out_h,
                                                   std::size_t out_w) {
  detail::check_output_size(out_h, out_w);
  if (static_cast<Eigen::Index>(fm.dim()) != bank.embeddings.cols())
    throw Error(Errc::DimensionMismatch, "feature and concept dimensions differ");
  const std::size_t gh = fm.height(), gw = fm.width();
  const auto n = static_cast<Eigen::Index>(fm.num_patches());
  const auto dim = static_cast<Eigen::Index>(fm.dim());
  Eigen::MatrixXd z(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < dim; ++c) z(i, c) = fm.patch(static_cast<std::size_t>(i))[static_cast<std::size_t>(c)];

  const Eigen::MatrixXd dots = z * bank.embeddings.transpose();  // n x K
  const Eigen::VectorXd concept_norms = bank.embeddings.rowwise().norm();

  // Inner products with the 3x3 neighbourhood, offset index (dy+1)*3 + (dx+1).
  std::vector<std::array<double, 9>> local(static_cast<std::size_t>(n));
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          double v = 0.0;
          if (yy >= 0 && xx >= 0 && yy < static_cast<long>(gh) && xx < static_cast<long>(gw))
            v = z.row(static_cast<Eigen::Index>(y * gw + x)).dot(z.row(static_cast<Eigen::Index>(yy * gw + xx)));
          local[y * gw + x][static_cast<std::size_t>((dy + 1) * 3 + (dx + 1))] = v;
        }

  const auto ty = detail::linear_taps(gh, out_h);
  const auto tx = detail::linear_taps(gw, out_w);
  HiResSegmentation out{out_h, out_w, std::vector<int>(out_h * out_w), bank.count()};
  Eigen::VectorXd pixel_dots(bank.embeddings.rows());
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::array<std::size_t, 4> ys{ty[y].lo, ty[y].lo, ty[y].hi, ty[y].hi};
      const std::array<std::size_t, 4> xs{tx[x].lo, tx[x].hi, tx[x].lo, tx[x].hi};
      const double wy = ty[y].w_hi, wx = tx[x].w_hi;
      const std::array<double, 4> w{(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};

      pixel_dots.setZero();
      double sq = 0.0;
      for (int a = 0; a < 4; ++a) {
        const std::size_t pa = ys[a] * gw + xs[a];
        pixel_dots += w[a] * dots.row(static_cast<Eigen::Index>(pa)).transpose();
        for (int b = 0; b < 4; ++b) {
          const long dy = static_cast<long>(ys[b]) - static_cast<long>(ys[a]);
          const long dx = static_cast<long>(xs[b]) - static_cast<long>(xs[a]);
          sq += w[a] * w[b] * local[pa][static_cast<std::size_t>((dy + 1) * 3 + (dx + 1))];
        }
      }
      const std::size_t i = y * out_w + x;
      if (!(sq > 0.0)) {
        out.labels[i] = seg.labels[detail::nearest_source(y, gh, out_h) * gw + detail::nearest_source(x, gw, out_w)];
        continue;
      }
      out.labels[i] = detail::argmax_cosine(pixel_dots, concept_norms, std::sqrt(sq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-adaptive refinement

struct PamrOptions {
  int iterations = 10;
  std::vector<int> dilations{1, 2, 4, 8, 12, 24};
};

/// Normalised propagation weights: row i holds w(i, j) over the fixed list
/// of neighbour offsets (zero for out-of-bounds neighbours).
template <typename Real>
struct PamrKernel {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::array<int, 2>> offsets;  // (dy, dx)
  std::vector<Real> weights;                // height*width x offsets.size()
};

template <typename Real>
PamrKernel<Real> pamr_kernel(const RgbImage& image, std::span<const int> dilations) {
  PamrKernel<Real> k;
  k.height = image.height;
  k.width = image.width;
  for (int d : dilations) {
    if (d < 1) throw Error(Errc::InvalidArgument, "dilations must be positive");
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dy != 0 || dx != 0) k.offsets.push_back({dy * d, dx * d});
  }
  const std::size_t m = k.offsets.size();
  k.weights.assign(image.height * image.width * m, Real(0));

  std::vector<double> logits(m);
  std::vector<char> valid(m);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      std::size_t count = 0;
      for (std::size_t o = 0; o < m; ++o) {
        const long yy = static_cast<long>(y) + k.offsets[o][0], xx = static_cast<long>(x) + k.offsets[o][1];
        valid[o] = yy >= 0 && xx >= 0 && yy < static_cast<long>(image.height) && xx < static_cast<long>(image.width);
        count += valid[o];
        logits[o] = 0.0;
      }
      if (count == 0) continue;

      for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t o = 0; o < m; ++o)
          if (valid[o]) mean += image.at(y + k.offsets[o][0], x + k.offsets[o][1], c);
        mean /= static_cast<double>(count);
        double var = 0.0;
        for (std::size_t o = 0; o < m; ++o)
          if (valid[o]) {
            const double dv = image.at(y + k.offsets[o][0], x + k.offsets[o][1], c) - mean;
            var += dv * dv;
          }
        var /= static_cast<double>(count);
        const double center = image.at(y, x, c);
        for (std::size_t o = 0; o < m; ++o)
          if (valid[o]) {
            const double diff = center - image.at(y + k.offsets[o][0], x + k.offsets[o][1], c);
            logits[o] -= diff * diff / (var + 1e-8) / 3.0;
          }
      }

      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < m; ++o)
        if (valid[o]) top = std::max(top, logits[o]);
      double total = 0.0;
      for (std::size_t o = 0; o < m; ++o)
        if (valid[o]) total += (logits[o] = std::exp(logits[o] - top));
      Real* row = k.weights.data() + (y * image.width + x) * m;
      for (std::size_t o = 0; o < m; ++o) row[o] = valid[o] ? static_cast<Real>(logits[o] / total) : Real(0);
    }
  }
  return k;
}

/// Label probabilities, pixel-major: probs[i * K + k].
template <typename Real>
using PamrObserver = std::function<void(int iteration, std::span<const Real> probs, int num_labels)>;

template <typename Real>
std::vector<Real> pamr_propagate(const PamrKernel<Real>& kernel, std::vector<Real> probs, int num_labels,
                                 int iterations, const PamrObserver<Real>& observer = {}) {
  const std::size_t n = kernel.height * kernel.width;
  const auto kk = static_cast<std::size_t>(num_labels);
  const std::size_t m = kernel.offsets.size();
  if (probs.size() != n * kk) throw Error(Errc::DimensionMismatch, "probability buffer size mismatch");
  std::vector<Real> next(probs.size());
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t y = 0; y < kernel.height; ++y) {
      for (std::size_t x = 0; x < kernel.width; ++x) {
        const std::size_t i = y * kernel.width + x;
        const Real* w = kernel.weights.data() + i * m;
        Real* out = next.data() + i * kk;
        bool any = false;
        std::fill(out, out + kk, Real(0));
        for (std::size_t o = 0; o < m; ++o) {
          if (w[o] == Real(0)) continue;
          any = true;
          const std::size_t j = (y + kernel.offsets[o][0]) * kernel.width + (x + kernel.offsets[o][1]);
          const Real* pj = probs.data() + j * kk;
          for (std::size_t l = 0; l < kk; ++l) out[l] += w[o] * pj[l];
        }
        if (!any) std::copy(probs.data() + i * kk, probs.data() + (i + 1) * kk, out);
      }
    }
    probs.swap(next);
    if (observer) observer(it, probs, num_labels);
  }
  return probs;
}

template <typename Real = float>
HiResSegmentation pamr_refine(const RgbImage& image, const HiResSegmentation& seg, const PamrOptions& options = {},
                              const PamrObserver<Real>& observer = {}) {
  if (image.height != seg.height || image.width != seg.width)
    throw Error(Errc::DimensionMismatch, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                             " vs segmentation " + std::to_string(seg.height) + "x" +
                                             std::to_string(seg.width));
  const auto kk = static_cast<std::size_t>(seg.num_segments);
  std::vector<Real> probs(seg.labels.size() * kk, Real(0));
  for (std::size_t i = 0; i < seg.labels.size(); ++i) probs[i * kk + static_cast<std::size_t>(seg.labels[i])] = Real(1);

  const auto kernel = pamr_kernel<Real>(image, options.dilations);
  probs = pamr_propagate<Real>(kernel, std::move(probs), seg.num_segments, options.iterations, observer);

  HiResSegmentation out{seg.height, seg.width, std::vector<int>(seg.labels.size()), seg.num_segments};
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    const Real* p = probs.data() + i * kk;
    out.labels[i] = static_cast<int>(std::max_element(p, p + kk) - p);
  }
  return out;
}

}  // namespace specseg

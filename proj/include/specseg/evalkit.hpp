#pragma once

// Segmentation scoring: Hungarian matching of unlabeled predicted segments
// to ground-truth classes, confusion accumulation and mIoU, plus the
// patch-coherence ROC analysis.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "specseg/error.hpp"
#include "specseg/tensorio.hpp"
#include "specseg/types.hpp"

namespace specseg {

// ---------------------------------------------------------------------------
// Assignment

/// row_to_col[i] is the column matched to row i, or -1.
struct Assignment {
  std::vector<int> row_to_col;
  double total = 0.0;
};

namespace detail {

// Shortest augmenting path Kuhn-Munkres for rows <= cols (1-based internals).
inline std::vector<int> kuhn_munkres(const Eigen::MatrixXd& cost) {
  const auto r = static_cast<int>(cost.rows());
  const auto c = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(r) + 1, 0.0), v(static_cast<std::size_t>(c) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(c) + 1, 0), way(static_cast<std::size_t>(c) + 1, 0);
  for (int i = 1; i <= r; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(c) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(c) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= c; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= c; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(r), -1);
  for (int j = 1; j <= c; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

inline double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& row_to_col) {
  double total = 0.0;
  for (std::size_t i = 0; i < row_to_col.size(); ++i)
    if (row_to_col[i] >= 0) total += cost(static_cast<Eigen::Index>(i), row_to_col[i]);
  return total;
}

inline double optimal_cost(const Eigen::MatrixXd& cost) {
  if (cost.rows() == 0) return 0.0;
  return assignment_cost(cost, kuhn_munkres(cost));
}

// Lexicographically smallest optimal row -> column vector, rows <= cols.
inline std::vector<int> lexicographic_assignment(const Eigen::MatrixXd& cost) {
  const Eigen::Index r = cost.rows(), c = cost.cols();
  const double best = optimal_cost(cost);
  const double slack = 1e-12 * std::max(1.0, std::abs(best));

  std::vector<int> out(static_cast<std::size_t>(r), -1);
  std::vector<char> col_used(static_cast<std::size_t>(c), 0);
  double fixed = 0.0;
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      if (col_used[static_cast<std::size_t>(j)]) continue;
      std::vector<Eigen::Index> cols;
      for (Eigen::Index jj = 0; jj < c; ++jj)
        if (!col_used[static_cast<std::size_t>(jj)] && jj != j) cols.push_back(jj);
      const Eigen::Index rest = r - i - 1;
      Eigen::MatrixXd sub(rest, static_cast<Eigen::Index>(cols.size()));
      for (Eigen::Index a = 0; a < rest; ++a)
        for (std::size_t b = 0; b < cols.size(); ++b) sub(a, static_cast<Eigen::Index>(b)) = cost(i + 1 + a, cols[b]);
      const double candidate = fixed + cost(i, j) + optimal_cost(sub);
      if (candidate <= best + slack) {
        out[static_cast<std::size_t>(i)] = static_cast<int>(j);
        col_used[static_cast<std::size_t>(j)] = 1;
        fixed += cost(i, j);
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Minimum-cost one-to-one assignment of min(rows, cols) pairs. Among optimal
/// assignments the result is the lexicographically smallest mapping from the
/// shorter side to the longer one (rows to columns when rows <= cols).
inline Assignment hungarian(const Eigen::MatrixXd& cost) {
  if (!cost.allFinite()) throw Error(Errc::NonFiniteCost, "cost matrix contains non-finite entries");
  Assignment out;
  out.row_to_col.assign(static_cast<std::size_t>(cost.rows()), -1);
  if (cost.rows() == 0 || cost.cols() == 0) return out;
  if (cost.rows() <= cost.cols()) {
    out.row_to_col = detail::lexicographic_assignment(cost);
  } else {
    const auto col_to_row = detail::lexicographic_assignment(cost.transpose());
    for (std::size_t j = 0; j < col_to_row.size(); ++j) out.row_to_col[static_cast<std::size_t>(col_to_row[j])] = static_cast<int>(j);
  }
  out.total = detail::assignment_cost(cost, out.row_to_col);
  return out;
}

// ---------------------------------------------------------------------------
// Matching and mIoU

inline constexpr int kVoidClass = -1;

struct ImageMatching {
  std::vector<int> gt_classes;     // classes present in the ground truth, ascending
  std::vector<int> pred_to_class;  // per predicted label; kVoidClass when unmatched
  Eigen::MatrixXd iou;             // predicted label x gt_classes
};

/// Matches predicted segments to ground-truth classes for one image. IoU is
/// measured over non-ignored pixels; Hungarian on (1 - IoU) pairs at most one
/// segment with each foreground class, dropping zero-overlap pairs. Unmatched
/// segments go to `background` when given, else to the void prediction.
inline ImageMatching match_segments(const HiResSegmentation& pred, const LabelMap& gt,
                                    std::optional<int> background = std::nullopt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw Error(Errc::DimensionMismatch, "prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                                             " vs ground truth " + std::to_string(gt.height) + "x" +
                                             std::to_string(gt.width));
  const auto k = static_cast<std::size_t>(pred.num_segments);
  std::map<int, std::size_t> class_index;
  for (std::uint16_t l : gt.labels)
    if (l != gt.ignore_index) class_index.emplace(l, 0);
  ImageMatching m;
  for (auto& [cls, idx] : class_index) {
    idx = m.gt_classes.size();
    m.gt_classes.push_back(cls);
  }

  const std::size_t c = m.gt_classes.size();
  Eigen::MatrixXd inter = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
  std::vector<double> pred_area(k, 0.0), gt_area(c, 0.0);
  std::vector<std::size_t> first_seen(k, std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i];
    if (p < 0 || static_cast<std::size_t>(p) >= k) throw Error(Errc::IndexOutOfRange, "predicted label outside [0, K)");
    first_seen[static_cast<std::size_t>(p)] = std::min(first_seen[static_cast<std::size_t>(p)], i);
    if (gt.labels[i] == gt.ignore_index) continue;
    const std::size_t g = class_index.at(gt.labels[i]);
    inter(p, static_cast<Eigen::Index>(g)) += 1.0;
    pred_area[static_cast<std::size_t>(p)] += 1.0;
    gt_area[g] += 1.0;
  }
  m.iou = Eigen::MatrixXd::Zero(inter.rows(), inter.cols());
  for (Eigen::Index p = 0; p < inter.rows(); ++p)
    for (Eigen::Index g = 0; g < inter.cols(); ++g) {
      const double uni = pred_area[static_cast<std::size_t>(p)] + gt_area[static_cast<std::size_t>(g)] - inter(p, g);
      m.iou(p, g) = uni > 0.0 ? inter(p, g) / uni : 0.0;
    }

  // Rows in order of first appearance so the outcome ignores label ids.
  std::vector<std::size_t> rows(k);
  for (std::size_t p = 0; p < k; ++p) rows[p] = p;
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return first_seen[a] < first_seen[b]; });
  std::vector<std::size_t> fg;
  for (std::size_t g = 0; g < c; ++g)
    if (!background || m.gt_classes[g] != *background) fg.push_back(g);

  Eigen::MatrixXd cost(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(fg.size()));
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < fg.size(); ++b)
      cost(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          1.0 - m.iou(static_cast<Eigen::Index>(rows[a]), static_cast<Eigen::Index>(fg[b]));

  m.pred_to_class.assign(k, background ? *background : kVoidClass);
  const auto assignment = hungarian(cost);
  for (std::size_t a = 0; a < k; ++a) {
    const int b = assignment.row_to_col[a];
    if (b < 0) continue;
    const std::size_t g = fg[static_cast<std::size_t>(b)];
    if (m.iou(static_cast<Eigen::Index>(rows[a]), static_cast<Eigen::Index>(g)) > 0.0)
      m.pred_to_class[rows[a]] = m.gt_classes[g];
  }
  return m;
}

struct EvalReport {
  std::vector<std::vector<std::uint64_t>> confusion;  // [gt class][predicted class]
  std::vector<std::uint64_t> void_counts;              // per gt class, pixels predicted void
  std::vector<std::optional<double>> per_class_iou;    // empty when the class never occurs in GT
  double miou = 0.0;
  std::vector<std::pair<std::string, std::vector<int>>> per_image_matchings;
};

/// Confusion accumulator; merging is associative and commutative.
class EvalAccumulator {
 public:
  void add(const HiResSegmentation& pred, const LabelMap& gt, const ImageMatching& matching,
           const std::string& name = {}) {
    if (pred.height != gt.height || pred.width != gt.width)
      throw Error(Errc::DimensionMismatch, "prediction and ground truth sizes differ" + (name.empty() ? "" : " for " + name));
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      const std::uint16_t g = gt.labels[i];
      if (g == gt.ignore_index) continue;
      const int p = matching.pred_to_class[static_cast<std::size_t>(pred.labels[i])];
      grow(std::max<int>(g, p) + 1);
      if (p == kVoidClass)
        ++void_counts_[g];
      else
        ++confusion_[g][static_cast<std::size_t>(p)];
    }
    if (!name.empty()) matchings_.emplace_back(name, matching.pred_to_class);
  }

  void merge(const EvalAccumulator& other) {
    grow(other.confusion_.size());
    for (std::size_t g = 0; g < other.confusion_.size(); ++g) {
      void_counts_[g] += other.void_counts_[g];
      for (std::size_t p = 0; p < other.confusion_.size(); ++p) confusion_[g][p] += other.confusion_[g][p];
    }
    matchings_.insert(matchings_.end(), other.matchings_.begin(), other.matchings_.end());
  }

  EvalReport report() const {
    EvalReport r;
    r.confusion = confusion_;
    r.void_counts = void_counts_;
    r.per_image_matchings = matchings_;
    std::sort(r.per_image_matchings.begin(), r.per_image_matchings.end());
    const std::size_t c = confusion_.size();
    r.per_class_iou.assign(c, std::nullopt);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t k = 0; k < c; ++k) {
      std::uint64_t gt_total = void_counts_[k], pred_total = 0;
      for (std::size_t j = 0; j < c; ++j) {
        gt_total += confusion_[k][j];
        pred_total += confusion_[j][k];
      }
      if (gt_total == 0) continue;
      const std::uint64_t tp = confusion_[k][k];
      const double iou = static_cast<double>(tp) / static_cast<double>(gt_total + pred_total - tp);
      r.per_class_iou[k] = iou;
      sum += iou;
      ++counted;
    }
    r.miou = counted ? sum / static_cast<double>(counted) : 0.0;
    return r;
  }

 private:
  void grow(std::size_t size) {
    if (size <= confusion_.size()) return;
    for (auto& row : confusion_) row.resize(size, 0);
    confusion_.resize(size, std::vector<std::uint64_t>(size, 0));
    void_counts_.resize(size, 0);
  }

  std::vector<std::vector<std::uint64_t>> confusion_;
  std::vector<std::uint64_t> void_counts_;
  std::vector<std::pair<std::string, std::vector<int>>> matchings_;
};

struct EvalItem {
  std::string name;
  HiResSegmentation prediction;
  LabelMap ground_truth;
};

inline EvalReport accumulate_and_miou(std::span<const EvalItem> items, std::optional<int> background = std::nullopt) {
  EvalAccumulator acc;
  for (const auto& item : items)
    acc.add(item.prediction, item.ground_truth, match_segments(item.prediction, item.ground_truth, background),
            item.name);
  return acc.report();
}

/// Raw prediction labels (any ids) as a dense segmentation.
inline HiResSegmentation segmentation_from_labels(const LabelMap& raw) {
  HiResSegmentation s{raw.height, raw.width, std::vector<int>(raw.labels.begin(), raw.labels.end()), 0};
  s.num_segments = renumber_by_first_occurrence(s.labels);
  return s;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["miou"] = r.miou;
  nlohmann::json ious = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) ious.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  j["per_class_iou"] = ious;
  j["confusion"] = r.confusion;
  j["void"] = r.void_counts;
  nlohmann::json images = nlohmann::json::object();
  for (const auto& [name, map] : r.per_image_matchings) images[name] = map;
  j["per_image_matchings"] = images;
  return j;
}

// ---------------------------------------------------------------------------
// Patch coherence

struct RocCurve {
  std::vector<double> thresholds;  // descending; the first is +inf
  std::vector<double> fpr;
  std::vector<double> tpr;
  double auc = 0.0;
};

/// ROC over every distinct score (pairs with equal scores enter together)
/// and its trapezoidal area.
inline RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> targets) {
  if (scores.size() != targets.size()) throw Error(Errc::DimensionMismatch, "scores and targets differ in length");
  std::size_t positives = 0;
  for (auto t : targets) positives += t ? 1 : 0;
  const std::size_t negatives = targets.size() - positives;
  if (positives == 0 || negatives == 0)
    throw Error(Errc::DegenerateLabels, "ROC needs at least one positive and one negative");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.thresholds.push_back(std::numeric_limits<double>::infinity());
  roc.fpr.push_back(0.0);
  roc.tpr.push_back(0.0);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (targets[order[i]] ? tp : fp) += 1;
    roc.thresholds.push_back(s);
    roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
    roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  for (std::size_t i = 1; i < roc.fpr.size(); ++i)
    roc.auc += (roc.fpr[i] - roc.fpr[i - 1]) * (roc.tpr[i] + roc.tpr[i - 1]) / 2.0;
  return roc;
}

/// Majority ground-truth label over each patch footprint; -1 where the
/// ignore label wins. Ties go to the smaller label value.
inline std::vector<int> patch_labels_by_majority(const LabelMap& gt, std::size_t grid_h, std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0 || gt.height < grid_h || gt.width < grid_w)
    throw Error(Errc::DimensionMismatch, "label map smaller than the patch grid");
  std::vector<std::map<std::uint16_t, std::size_t>> votes(grid_h * grid_w);
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < gt.width; ++x) ++votes[(y * grid_h / gt.height) * grid_w + x * grid_w / gt.width][gt.at(y, x)];
  std::vector<int> out(votes.size(), -1);
  for (std::size_t i = 0; i < votes.size(); ++i) {
    std::uint16_t winner = 0;
    std::size_t best = 0;
    for (const auto& [label, count] : votes[i])
      if (count > best) best = count, winner = label;
    out[i] = winner == gt.ignore_index ? -1 : winner;
  }
  return out;
}

/// Samples `num_pairs` distinct-patch pairs uniformly from the pooled
/// patches of all images and scores same-class prediction by cosine.
inline RocCurve coherence_auc(std::span<const FeatureMap> features, std::span<const LabelMap> labels,
                              std::size_t num_pairs, std::uint64_t seed) {
  if (features.size() != labels.size()) throw Error(Errc::DimensionMismatch, "feature/label list lengths differ");
  std::vector<Eigen::VectorXd> vecs;
  std::vector<int> classes;
  std::optional<std::size_t> dim;
  for (std::size_t f = 0; f < features.size(); ++f) {
    const auto& fm = features[f];
    if (dim && *dim != fm.dim()) throw Error(Errc::DimensionMismatch, "feature dimensions differ across images");
    dim = fm.dim();
    const auto patch_labels = patch_labels_by_majority(labels[f], fm.height(), fm.width());
    for (std::size_t i = 0; i < fm.num_patches(); ++i) {
      if (patch_labels[i] < 0) continue;
      Eigen::VectorXd v(static_cast<Eigen::Index>(fm.dim()));
      for (std::size_t c = 0; c < fm.dim(); ++c) v(static_cast<Eigen::Index>(c)) = fm.patch(i)[c];
      const double norm = v.norm();
      if (norm == 0.0) throw Error(Errc::ZeroNormPatch, "patch " + std::to_string(i) + " of image " + std::to_string(f));
      vecs.push_back(v / norm);
      classes.push_back(patch_labels[i]);
    }
  }
  if (vecs.size() < 2 || std::all_of(classes.begin(), classes.end(), [&](int c) { return c == classes.front(); }))
    throw Error(Errc::DegenerateLabels, "coherence needs patches from at least two classes");

  std::mt19937_64 rng(seed);
  const std::uint64_t n = vecs.size();
  std::vector<double> scores(num_pairs);
  std::vector<std::uint8_t> targets(num_pairs);
  for (std::size_t s = 0; s < num_pairs; ++s) {
    const std::uint64_t i = rng() % n;
    std::uint64_t j = rng() % (n - 1);
    if (j >= i) ++j;
    scores[s] = vecs[i].dot(vecs[j]);
    targets[s] = classes[i] == classes[j] ? 1 : 0;
  }
  return roc_curve(scores, targets);
}

inline std::string roc_to_csv(const RocCurve& roc) {
  std::ostringstream out;
  out.precision(17);
  out << "threshold,fpr,tpr\n";
  for (std::size_t i = 0; i < roc.fpr.size(); ++i) out << roc.thresholds[i] << ',' << roc.fpr[i] << ',' << roc.tpr[i] << '\n';
  return out.str();
}

}  // namespace specseg

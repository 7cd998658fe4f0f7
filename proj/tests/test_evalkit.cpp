#include <gtest/gtest.h>

#include "expect_error.hpp"
#include "support.hpp"

using namespace specseg;

namespace {

HiResSegmentation pred_of(std::size_t h, std::size_t w, std::vector<int> labels) {
  HiResSegmentation s{h, w, std::move(labels), 0};
  s.num_segments = renumber_by_first_occurrence(s.labels);
  return s;
}

LabelMap gt_of(std::size_t h, std::size_t w, std::vector<std::uint16_t> labels) {
  return LabelMap{h, w, std::move(labels), 255};
}

double summed_iou(const ImageMatching& m) {
  double s = 0;
  for (std::size_t p = 0; p < m.pred_to_class.size(); ++p) {
    const int c = m.pred_to_class[p];
    if (c < 0) continue;
    const auto it = std::find(m.gt_classes.begin(), m.gt_classes.end(), c);
    s += m.iou(static_cast<Eigen::Index>(p), it - m.gt_classes.begin());
  }
  return s;
}

}  // namespace

TEST(Hungarian, TwoByTwo) {
  Eigen::Matrix2d c;
  c << 1, 2, 2, 1;
  const auto a = hungarian(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1}));
  EXPECT_EQ(a.total, 2.0);
}

TEST(Hungarian, OneByOneAndEmpty) {
  const auto a = hungarian(Eigen::MatrixXd::Constant(1, 1, 4.5));
  EXPECT_EQ(a.row_to_col, std::vector<int>{0});
  EXPECT_EQ(a.total, 4.5);
  EXPECT_TRUE(hungarian(Eigen::MatrixXd(0, 3)).row_to_col.empty());
  EXPECT_EQ(hungarian(Eigen::MatrixXd(2, 0)).row_to_col, (std::vector<int>{-1, -1}));
}

TEST(Hungarian, RectangularBothWays) {
  Eigen::MatrixXd c(2, 3);
  c << 5, 1, 3, 2, 4, 0;
  auto a = hungarian(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{1, 2}));
  EXPECT_EQ(a.total, 1.0);
  a = hungarian(c.transpose());
  EXPECT_EQ(a.row_to_col, (std::vector<int>{-1, 0, 1}));
  EXPECT_EQ(a.total, 1.0);
}

TEST(Hungarian, LexicographicTieBreak) {
  const auto a = hungarian(Eigen::MatrixXd::Ones(4, 4));
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1, 2, 3}));
  Eigen::Matrix3d c;
  c << 0, 0, 1, 0, 0, 1, 1, 1, 0;
  EXPECT_EQ(hungarian(c).row_to_col, (std::vector<int>{0, 1, 2}));
  Eigen::Matrix2d d;
  d << 1, 1, 1, 1;
  EXPECT_EQ(hungarian(d).row_to_col, (std::vector<int>{0, 1}));
}

TEST(Hungarian, MatchesEnumerationOnSmallSquares) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int t = 0; t < 60; ++t) {
    const int n = 1 + t % 6;
    Eigen::MatrixXd c(n, n);
    for (int i = 0; i < n * n; ++i) c(i / n, i % n) = u(rng);
    EXPECT_EQ(hungarian(c).total, testsupport::brute_assignment(c));
  }
}

TEST(Hungarian, IntegerTiesResolvedLexicographically) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 40; ++t) {
    const int n = 5;
    Eigen::MatrixXd c(n, n);
    for (int i = 0; i < n * n; ++i) c(i / n, i % n) = static_cast<double>(rng() % 3);
    const auto a = hungarian(c);
    const double best = testsupport::brute_assignment(c);
    EXPECT_EQ(a.total, best);
    // The smallest optimal permutation in lexicographic order.
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double total = 0;
      for (int i = 0; i < n; ++i) total += c(i, perm[static_cast<std::size_t>(i)]);
      if (total == best) break;
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_EQ(a.row_to_col, perm);
  }
}

TEST(Hungarian, NonFiniteRejected) {
  Eigen::Matrix2d c;
  c << 1, std::numeric_limits<double>::quiet_NaN(), 0, 1;
  expect_code(Errc::NonFiniteCost, [&] { hungarian(c); });
}

TEST(Matching, IdenticalSegmentsGiveIdentity) {
  const auto gt = gt_of(2, 3, {4, 4, 7, 9, 9, 7});
  const auto pred = pred_of(2, 3, {10, 10, 11, 12, 12, 11});
  const auto m = match_segments(pred, gt);
  EXPECT_EQ(m.gt_classes, (std::vector<int>{4, 7, 9}));
  EXPECT_EQ(m.pred_to_class, (std::vector<int>{4, 7, 9}));
  for (int p = 0; p < 3; ++p) EXPECT_EQ(m.iou.row(p).maxCoeff(), 1.0);
}

TEST(Matching, UnmatchedGoToBackground) {
  // GT: background 0 everywhere except a foreground object 1 in the last column.
  const auto gt = gt_of(2, 4, {0, 0, 0, 1, 0, 0, 0, 1});
  const auto pred = pred_of(2, 4, {0, 0, 1, 2, 0, 0, 1, 2});
  const auto m = match_segments(pred, gt, 0);
  EXPECT_EQ(m.pred_to_class, (std::vector<int>{0, 0, 1}));
  const auto nobg = match_segments(pred, gt);
  EXPECT_EQ(std::count(nobg.pred_to_class.begin(), nobg.pred_to_class.end(), kVoidClass), 1);
}

TEST(Matching, IgnoredPixelsExcluded) {
  const auto gt = gt_of(1, 4, {1, 255, 255, 2});
  const auto pred = pred_of(1, 4, {0, 0, 1, 1});
  const auto m = match_segments(pred, gt);
  EXPECT_EQ(m.iou(0, 0), 1.0);
  EXPECT_EQ(m.iou(1, 1), 1.0);
}

TEST(Matching, ExhaustiveOracleThreeVersusTwo) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 30; ++t) {
    std::vector<int> p(16);
    std::vector<std::uint16_t> g(16);
    for (auto& v : p) v = static_cast<int>(rng() % 3);
    for (auto& v : g) v = static_cast<std::uint16_t>(rng() % 2);
    const auto pred = pred_of(4, 4, p);
    const auto gt = gt_of(4, 4, g);
    const auto m = match_segments(pred, gt);
    // Best summed IoU over all one-to-one partial assignments.
    const auto rows = m.iou.rows(), cols = m.iou.cols();
    double best = 0;
    for (Eigen::Index a = -1; a < rows; ++a)
      for (Eigen::Index b = -1; b < rows; ++b) {
        if (a >= 0 && a == b) continue;
        double s = 0;
        if (a >= 0 && cols > 0) s += m.iou(a, 0);
        if (b >= 0 && cols > 1) s += m.iou(b, 1);
        best = std::max(best, s);
      }
    EXPECT_NEAR(summed_iou(m), best, 1e-12);
  }
}

TEST(Matching, DimensionMismatch) {
  expect_code(Errc::DimensionMismatch, [] { match_segments(pred_of(1, 2, {0, 0}), gt_of(2, 1, {0, 0})); });
}

TEST(Miou, PerfectPrediction) {
  const auto gt = gt_of(2, 2, {0, 1, 1, 2});
  const std::vector<EvalItem> items{{"a", pred_of(2, 2, {5, 6, 6, 7}), gt}};
  EXPECT_EQ(accumulate_and_miou(items).miou, 1.0);
}

TEST(Miou, SingleSegmentOverTwoClasses) {
  const auto gt = gt_of(2, 2, {0, 0, 1, 1});
  const std::vector<EvalItem> items{{"a", pred_of(2, 2, {0, 0, 0, 0}), gt}};
  const auto r = accumulate_and_miou(items);
  EXPECT_EQ(r.miou, 0.25);
  EXPECT_EQ(*r.per_class_iou[0], 0.5);
  EXPECT_EQ(*r.per_class_iou[1], 0.0);
}

TEST(Miou, NoOverlapIsZero) {
  // Void predictions only: every GT class has zero true positives.
  const auto gt = gt_of(1, 2, {0, 1});
  EvalAccumulator acc;
  const auto pred = pred_of(1, 2, {0, 0});
  ImageMatching m;
  m.pred_to_class = {kVoidClass};
  acc.add(pred, gt, m);
  EXPECT_EQ(acc.report().miou, 0.0);
}

TEST(Miou, TwoImageHandComputed) {
  // Image a: GT [0 0 1 1 | 0 0 1 1], pred one segment over the first three
  // columns and one over the last. Image b: GT all class 2, pred 2 segments.
  const auto gt_a = gt_of(2, 4, {0, 0, 1, 1, 0, 0, 1, 1});
  const auto pr_a = pred_of(2, 4, {0, 0, 0, 1, 0, 0, 0, 1});
  const auto gt_b = gt_of(1, 4, {2, 2, 2, 2});
  const auto pr_b = pred_of(1, 4, {0, 0, 0, 1});
  const std::vector<EvalItem> items{{"a", pr_a, gt_a}, {"b", pr_b, gt_b}};
  const auto r = accumulate_and_miou(items);
  // a: seg0 (6 px: 4 of class 0, 2 of class 1) -> class 0 (IoU 4/6);
  //    seg1 (2 px, class 1) -> class 1 (IoU 2/4).
  // b: seg0 (3 px) -> class 2; seg1 (1 px) -> void.
  // class 0: TP 4, FP 2, FN 0 -> 4/6; class 1: TP 2, FP 0, FN 2 -> 2/4;
  // class 2: TP 3, FP 0, FN 1 -> 3/4.
  EXPECT_NEAR(r.miou, (4.0 / 6.0 + 0.5 + 0.75) / 3.0, 1e-12);
  EXPECT_EQ(r.void_counts[2], 1u);
  EXPECT_EQ(r.confusion[1][0], 2u);
}

TEST(Miou, RelabelingAndOrderInvariant) {
  std::mt19937_64 rng(4);
  std::vector<EvalItem> items;
  for (int i = 0; i < 6; ++i) {
    std::vector<int> p(30);
    std::vector<std::uint16_t> g(30);
    for (auto& v : p) v = static_cast<int>(rng() % 4);
    for (auto& v : g) v = static_cast<std::uint16_t>(rng() % 5 == 0 ? 255 : rng() % 3);
    items.push_back({"img" + std::to_string(i), pred_of(5, 6, p), gt_of(5, 6, g)});
  }
  const auto base = accumulate_and_miou(items, 0);
  auto permuted = items;
  for (auto& it : permuted)
    for (auto& l : it.prediction.labels) l = it.prediction.num_segments - 1 - l;
  std::reverse(permuted.begin(), permuted.end());
  const auto r = accumulate_and_miou(permuted, 0);
  EXPECT_EQ(r.miou, base.miou);
  EXPECT_EQ(r.confusion, base.confusion);
}

TEST(Miou, JsonShape) {
  const auto gt = gt_of(1, 2, {0, 1});
  const std::vector<EvalItem> items{{"x", pred_of(1, 2, {0, 1}), gt}};
  const auto j = to_json(accumulate_and_miou(items));
  EXPECT_EQ(j["miou"], 1.0);
  EXPECT_EQ(j["per_image_matchings"]["x"], nlohmann::json({0, 1}));
  EXPECT_EQ(j["per_class_iou"].size(), 2u);
}

TEST(Roc, PerfectOrdering) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<std::uint8_t> t{1, 1, 0, 0};
  const auto roc = roc_curve(s, t);
  EXPECT_EQ(roc.auc, 1.0);
  EXPECT_EQ(roc.fpr.front(), 0.0);
  EXPECT_EQ(roc.tpr.front(), 0.0);
  EXPECT_EQ(roc.fpr.back(), 1.0);
  EXPECT_EQ(roc.tpr.back(), 1.0);
}

TEST(Roc, HandBuiltRanks) {
  const std::vector<double> s{0.2, 0.7, 0.7, 0.4, 0.9, 0.1};
  const std::vector<std::uint8_t> t{1, 0, 1, 0, 1, 0};
  EXPECT_NEAR(roc_curve(s, t).auc, testsupport::mann_whitney(s, t), 1e-12);
  // positives {0.2, 0.7, 0.9} vs negatives {0.7, 0.4, 0.1}: 1 + 2.5 + 3 = 6.5 of 9
  EXPECT_NEAR(roc_curve(s, t).auc, 6.5 / 9.0, 1e-12);
}

TEST(Roc, RandomLabelsNearHalf) {
  std::mt19937_64 rng(5);
  std::vector<double> s(10000);
  std::vector<std::uint8_t> t(10000);
  std::uniform_real_distribution<double> u;
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = u(rng), t[i] = rng() & 1u;
  EXPECT_NEAR(roc_curve(s, t).auc, 0.5, 0.05);
}

TEST(Roc, Degenerate) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<std::uint8_t> t{1, 1};
  expect_code(Errc::DegenerateLabels, [&] { roc_curve(s, t); });
}

TEST(Coherence, MajorityPatchLabels) {
  // 4x4 pixels over a 2x2 grid.
  const auto gt = gt_of(4, 4, {1, 1, 2, 2, 1, 255, 2, 255, 255, 255, 3, 3, 255, 0, 3, 0});
  EXPECT_EQ(patch_labels_by_majority(gt, 2, 2), (std::vector<int>{1, 2, -1, 3}));
}

TEST(Coherence, SeparableClassesGiveAucOne) {
  std::mt19937_64 rng(6);
  std::vector<FeatureMap> fms;
  std::vector<LabelMap> gts;
  for (int img = 0; img < 3; ++img) {
    const auto labels = testsupport::random_blocks(rng, 16, 2);
    fms.push_back(testsupport::planted_features(rng, 4, 4, 2, labels, 0.0f));
    LabelMap gt{8, 8, std::vector<std::uint16_t>(64), 255};
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) gt.labels[y * 8 + x] = static_cast<std::uint16_t>(labels[(y / 2) * 4 + x / 2]);
    gts.push_back(gt);
  }
  const auto roc = coherence_auc(fms, gts, 2000, 1);
  EXPECT_EQ(roc.auc, 1.0);
  EXPECT_EQ(roc_to_csv(roc).substr(0, 18), "threshold,fpr,tpr\n");
}

TEST(Coherence, SingleClassIsDegenerate) {
  std::mt19937_64 rng(7);
  std::vector<FeatureMap> fms{testsupport::random_features(rng, 2, 2, 3)};
  std::vector<LabelMap> gts{gt_of(2, 2, {5, 5, 5, 5})};
  expect_code(Errc::DegenerateLabels, [&] { coherence_auc(fms, gts, 100, 0); });
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <tuple>
#include <vector>

#include "test_support.hpp"

namespace rectconv {
namespace {

using testing::throws_code;

LabelMap halves(int w, int h, int left, int right) {
  LabelMap m(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.at(x, y) = x < w / 2 ? left : right;
  }
  return m;
}

// Scalar oracle working directly on label arrays, one class at a time.
struct SegOracle {
  double miou = 0.0, acc = 0.0;
  std::uint64_t correct = 0, total = 0;
};

SegOracle seg_oracle(const std::vector<std::pair<LabelMap, LabelMap>>& pairs, int n, int ignore) {
  SegOracle o;
  double iou_sum = 0.0;
  int present = 0;
  for (int c = 0; c < n; ++c) {
    std::uint64_t inter = 0, uni = 0;
    for (const auto& [gt, pred] : pairs) {
      for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        if (gt.labels[i] == ignore) continue;
        const bool g = gt.labels[i] == c, p = pred.labels[i] == c;
        inter += g && p;
        uni += g || p;
      }
    }
    if (uni) {
      iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
      ++present;
    }
  }
  for (const auto& [gt, pred] : pairs) {
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (gt.labels[i] == ignore) continue;
      ++o.total;
      o.correct += gt.labels[i] == pred.labels[i];
    }
  }
  o.miou = 100.0 * iou_sum / present;
  o.acc = 100.0 * static_cast<double>(o.correct) / static_cast<double>(o.total);
  return o;
}

TEST(Segmentation, PerfectPrediction) {
  const auto gt = halves(8, 4, 0, 2);
  const auto cm = accumulate(ConfusionMatrix(3), gt, gt);
  EXPECT_DOUBLE_EQ(miou(cm), 100.0);
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 100.0);
}

TEST(Segmentation, ConstantPredictionOnTwoClassHalves) {
  const auto gt = halves(10, 6, 0, 1);
  const auto cm = accumulate(ConfusionMatrix(2), gt, LabelMap(10, 6, 0));
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 50.0);
  EXPECT_DOUBLE_EQ(miou(cm), 25.0);
  EXPECT_DOUBLE_EQ(*cm.iou(0), 0.5);
  EXPECT_DOUBLE_EQ(*cm.iou(1), 0.0);
}

TEST(Segmentation, AllIgnoredIsEmptyEvaluation) {
  const LabelMap gt(5, 5, 255);
  const auto cm = accumulate(ConfusionMatrix(3, 255), gt, LabelMap(5, 5, 1));
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_TRUE(throws_code(ErrorCode::EmptyEvaluation, [&] { miou(cm); }));
  EXPECT_TRUE(throws_code(ErrorCode::EmptyEvaluation, [&] { pixel_accuracy(cm); }));
}

TEST(Segmentation, InputErrors) {
  ConfusionMatrix cm(3, 255);
  EXPECT_TRUE(throws_code(ErrorCode::ShapeMismatch, [&] { cm.accumulate(LabelMap(4, 4), LabelMap(4, 5)); }));
  EXPECT_TRUE(throws_code(ErrorCode::LabelOutOfRange, [&] { cm.add(3, 0); }));
  EXPECT_TRUE(throws_code(ErrorCode::LabelOutOfRange, [&] { cm.add(0, -1); }));
  EXPECT_TRUE(throws_code(ErrorCode::InvalidArgument, [] { ConfusionMatrix(3, 2); }));
}

TEST(Segmentation, AbsentClassesLeaveTheMean) {
  // Class 2 appears nowhere; the mean runs over classes 0 and 1 only.
  const auto gt = halves(4, 2, 0, 1);
  const auto cm = accumulate(ConfusionMatrix(3), gt, gt);
  EXPECT_FALSE(cm.iou(2).has_value());
  EXPECT_DOUBLE_EQ(miou(cm), 100.0);
}

TEST(Segmentation, IgnoredPredictionCountsAsMiss) {
  ConfusionMatrix cm(2, 255);
  cm.add(0, 0);
  cm.add(0, 255);
  cm.add(1, 1);
  cm.add(255, 0);
  EXPECT_EQ(cm.total(), 3u);
  EXPECT_EQ(cm.unmatched(0), 1u);
  EXPECT_NEAR(pixel_accuracy(cm), 200.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(*cm.iou(0), 0.5);
  EXPECT_DOUBLE_EQ(*cm.iou(1), 1.0);
}

TEST(Segmentation, RandomMapsMatchScalarOracle) {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 5;
    const int ignore = 255;
    std::vector<std::pair<LabelMap, LabelMap>> pairs;
    ConfusionMatrix cm(n, ignore);
    const int images = 1 + trial % 3;
    for (int k = 0; k < images; ++k) {
      const int w = 3 + static_cast<int>(rng() % 12), h = 3 + static_cast<int>(rng() % 12);
      LabelMap gt(w, h), pred(w, h);
      for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        gt.labels[i] = rng() % 10 == 0 ? ignore : static_cast<int>(rng() % n);
        // Predictions agree with the ground truth more often than chance.
        pred.labels[i] = rng() % 2 ? static_cast<int>(rng() % n) : std::max(gt.labels[i] % 255, 0);
      }
      cm.accumulate(gt, pred);
      pairs.emplace_back(gt, pred);
    }
    const auto oracle = seg_oracle(pairs, n, ignore);
    std::uint64_t trace = 0;
    for (int c = 0; c < n; ++c) trace += cm.count(c, c);
    EXPECT_EQ(cm.total(), oracle.total);
    EXPECT_EQ(trace, oracle.correct);
    EXPECT_NEAR(miou(cm), oracle.miou, 1e-9);
    EXPECT_NEAR(pixel_accuracy(cm), oracle.acc, 1e-9);
  }
}

TEST(Segmentation, RelabelingInvariance) {
  std::mt19937 rng(2);
  const int n = 5;
  LabelMap gt(20, 15), pred(20, 15);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    gt.labels[i] = static_cast<int>(rng() % n);
    pred.labels[i] = rng() % 3 ? gt.labels[i] : static_cast<int>(rng() % n);
  }
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  LabelMap gt2 = gt, pred2 = pred;
  for (auto& l : gt2.labels) l = perm[static_cast<std::size_t>(l)];
  for (auto& l : pred2.labels) l = perm[static_cast<std::size_t>(l)];
  const auto a = accumulate(ConfusionMatrix(n), gt, pred);
  const auto b = accumulate(ConfusionMatrix(n), gt2, pred2);
  EXPECT_NEAR(miou(a), miou(b), 1e-12);
  EXPECT_DOUBLE_EQ(pixel_accuracy(a), pixel_accuracy(b));
}

TEST(Segmentation, MergeIsAssociative) {
  std::mt19937 rng(3);
  std::vector<std::pair<LabelMap, LabelMap>> batch;
  for (int k = 0; k < 3; ++k) {
    LabelMap gt(7, 9), pred(7, 9);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      gt.labels[i] = static_cast<int>(rng() % 4);
      pred.labels[i] = static_cast<int>(rng() % 4);
    }
    batch.emplace_back(gt, pred);
  }
  ConfusionMatrix all(4), a(4), b(4), c(4);
  for (const auto& [g, p] : batch) all.accumulate(g, p);
  a.accumulate(batch[0].first, batch[0].second);
  b.accumulate(batch[1].first, batch[1].second);
  c.accumulate(batch[2].first, batch[2].second);
  ConfusionMatrix left = a, right = b;
  left.merge(b);
  left.merge(c);
  right.merge(c);
  ConfusionMatrix right_total = a;
  right_total.merge(right);
  EXPECT_EQ(left, all);
  EXPECT_EQ(right_total, all);
  EXPECT_TRUE(throws_code(ErrorCode::ShapeMismatch, [&] { left.merge(ConfusionMatrix(5)); }));
}

// --- Detection ----------------------------------------------------------------

TEST(Detection, SingleBoxSinglePoint) {
  const auto s = point_detection_prf({{BoxDet{0, 0, 10, 10, 0.9}}}, {{PointGT{5, 5}}});
  EXPECT_DOUBLE_EQ(s.precision, 100.0);
  EXPECT_DOUBLE_EQ(s.recall, 100.0);
  EXPECT_DOUBLE_EQ(s.f1, 100.0);
}

TEST(Detection, TwoBoxesOnePoint) {
  const auto s = point_detection_prf({{BoxDet{0, 0, 10, 10, 0.9}, BoxDet{2, 2, 12, 12, 0.8}}}, {{PointGT{5, 5}}});
  EXPECT_EQ(s.tp, 1u);
  EXPECT_EQ(s.fp, 1u);
  EXPECT_EQ(s.fn, 0u);
  EXPECT_DOUBLE_EQ(s.precision, 50.0);
  EXPECT_DOUBLE_EQ(s.recall, 100.0);
  EXPECT_NEAR(s.f1, 200.0 / 3.0, 1e-9);
}

TEST(Detection, NoPredictions) {
  const auto s = point_detection_prf({{}}, {{PointGT{5, 5}}});
  EXPECT_EQ(s.fn, 1u);
  EXPECT_EQ(s.precision, 0.0);
  EXPECT_EQ(s.recall, 0.0);
  EXPECT_EQ(s.f1, 0.0);
}

TEST(Detection, ThresholdAndImageCountChecks) {
  const auto s = point_detection_prf({{BoxDet{0, 0, 10, 10, 0.3}}}, {{PointGT{5, 5}}}, 0.5);
  EXPECT_EQ(s.tp, 0u);
  EXPECT_EQ(s.fp, 0u);
  EXPECT_TRUE(throws_code(ErrorCode::ShapeMismatch, [] { point_detection_prf({{}, {}}, {{}}); }));
}

// Independent matcher: candidates ranked by (score desc, index asc); each
// claims the free point minimising (distance to centre, point index).
DetectionScore prf_oracle(const std::vector<std::vector<BoxDet>>& preds,
                          const std::vector<std::vector<PointGT>>& gts, double thr) {
  DetectionScore s;
  for (std::size_t img = 0; img < preds.size(); ++img) {
    std::vector<std::tuple<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < preds[img].size(); ++i) {
      if (preds[img][i].score >= thr) ranked.emplace_back(-preds[img][i].score, i);
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<int> owner(gts[img].size(), -1);
    for (const auto& [neg, i] : ranked) {
      const auto& b = preds[img][i];
      std::vector<std::tuple<double, std::size_t>> options;
      for (std::size_t g = 0; g < gts[img].size(); ++g) {
        const auto& p = gts[img][g];
        if (owner[g] >= 0 || p.u < b.u_min || p.u > b.u_max || p.v < b.v_min || p.v > b.v_max) continue;
        options.emplace_back(std::hypot(p.u - 0.5 * (b.u_min + b.u_max), p.v - 0.5 * (b.v_min + b.v_max)), g);
      }
      if (options.empty()) {
        ++s.fp;
      } else {
        owner[std::get<1>(*std::min_element(options.begin(), options.end()))] = static_cast<int>(i);
        ++s.tp;
      }
    }
    for (int o : owner) s.fn += o < 0;
  }
  s.precision = s.tp + s.fp ? 100.0 * s.tp / double(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn ? 100.0 * s.tp / double(s.tp + s.fn) : 0.0;
  s.f1 = s.tp ? 2.0 * s.tp / double(2 * s.tp + s.fp + s.fn) * 100.0 : 0.0;
  return s;
}

std::pair<std::vector<std::vector<BoxDet>>, std::vector<std::vector<PointGT>>> random_scene(std::mt19937& rng,
                                                                                            bool distinct_scores) {
  std::uniform_real_distribution<double> pos(0.0, 100.0), size(5.0, 40.0), score(0.0, 1.0);
  const int images = 1 + static_cast<int>(rng() % 4);
  std::vector<std::vector<BoxDet>> preds(images);
  std::vector<std::vector<PointGT>> gts(images);
  for (int k = 0; k < images; ++k) {
    const int np = static_cast<int>(rng() % 8), ng = static_cast<int>(rng() % 8);
    for (int i = 0; i < ng; ++i) gts[k].push_back({pos(rng), pos(rng)});
    for (int i = 0; i < np; ++i) {
      const double u = pos(rng), v = pos(rng), w = size(rng), h = size(rng);
      const double sc = distinct_scores ? score(rng) : 0.25 * (1 + rng() % 4);
      preds[k].push_back({u, v, u + w, v + h, sc});
    }
  }
  return {preds, gts};
}

TEST(Detection, RandomScenesMatchOracle) {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto [preds, gts] = random_scene(rng, trial % 2 == 0);
    for (double thr : {0.0, 0.5}) {
      const auto got = point_detection_prf(preds, gts, thr);
      const auto want = prf_oracle(preds, gts, thr);
      EXPECT_EQ(got.tp, want.tp);
      EXPECT_EQ(got.fp, want.fp);
      EXPECT_EQ(got.fn, want.fn);
      EXPECT_NEAR(got.precision, want.precision, 1e-9);
      EXPECT_NEAR(got.recall, want.recall, 1e-9);
      EXPECT_NEAR(got.f1, want.f1, 1e-9);
      for (double m : {got.precision, got.recall, got.f1}) {
        EXPECT_GE(m, 0.0);
        EXPECT_LE(m, 100.0);
      }
      if (got.tp == 0) {
        EXPECT_EQ(got.f1, 0.0);
      }
    }
  }
}

TEST(Detection, OrderIndependentForDistinctScores) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    auto [preds, gts] = random_scene(rng, true);
    const auto base = point_detection_prf(preds, gts, 0.0);
    for (auto& p : preds) std::shuffle(p.begin(), p.end(), rng);
    const auto shuffled = point_detection_prf(preds, gts, 0.0);
    EXPECT_EQ(base.tp, shuffled.tp);
    EXPECT_EQ(base.fp, shuffled.fp);
    EXPECT_EQ(base.fn, shuffled.fn);
  }
}

TEST(Detection, ComponentBoxes) {
  LabelMap m(8, 6, 0);
  for (int y = 1; y <= 2; ++y) {
    for (int x = 1; x <= 3; ++x) m.at(x, y) = 1;
  }
  m.at(6, 4) = 1;
  m.at(7, 5) = 1;  // diagonal neighbour: separate component
  const auto boxes = component_boxes(m, 1);
  ASSERT_EQ(boxes.size(), 3u);
  EXPECT_DOUBLE_EQ(boxes[0].u_min, 0.5);
  EXPECT_DOUBLE_EQ(boxes[0].u_max, 3.5);
  EXPECT_DOUBLE_EQ(boxes[0].v_min, 0.5);
  EXPECT_DOUBLE_EQ(boxes[0].v_max, 2.5);
  EXPECT_EQ(component_boxes(m, 1, 2).size(), 1u);
}

// --- Distribution shift ---------------------------------------------------------

TEST(DistributionShift, IdenticalSamples) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const auto d = distribution_shift(a, a);
  EXPECT_EQ(d.mean_shift, 0.0);
  EXPECT_EQ(d.median_shift, 0.0);
  EXPECT_EQ(d.ks_statistic, 0.0);
  EXPECT_EQ(d.histograms.counts_a, d.histograms.counts_b);
  EXPECT_EQ(d.histograms.counts_a.size(), 64u);
}

TEST(DistributionShift, UnitShiftWithDisjointSupport) {
  const std::vector<double> a{0.0, 0.25, 0.5, 0.75};
  std::vector<double> b = a;
  for (auto& v : b) v += 1.0;
  const auto d = distribution_shift(a, b);
  EXPECT_DOUBLE_EQ(d.mean_shift, 1.0);
  EXPECT_DOUBLE_EQ(d.median_shift, 1.0);
  EXPECT_DOUBLE_EQ(d.ks_statistic, 1.0);
}

TEST(DistributionShift, KsAgainstBruteForce) {
  std::mt19937 rng(6);
  std::normal_distribution<double> n0(0.0, 1.0), n1(0.3, 1.2);
  std::vector<double> a(300), b(200);
  for (auto& v : a) v = std::round(4 * n0(rng)) / 4;  // ties on purpose
  for (auto& v : b) v = std::round(4 * n1(rng)) / 4;
  double brute = 0.0;
  for (double x : a) {
    const double fa = std::count_if(a.begin(), a.end(), [&](double v) { return v <= x; }) / 300.0;
    const double fb = std::count_if(b.begin(), b.end(), [&](double v) { return v <= x; }) / 200.0;
    brute = std::max(brute, std::abs(fa - fb));
  }
  for (double x : b) {
    const double fa = std::count_if(a.begin(), a.end(), [&](double v) { return v <= x; }) / 300.0;
    const double fb = std::count_if(b.begin(), b.end(), [&](double v) { return v <= x; }) / 200.0;
    brute = std::max(brute, std::abs(fa - fb));
  }
  const auto d = distribution_shift(a, b);
  EXPECT_NEAR(d.ks_statistic, brute, 1e-12);
  std::uint64_t total_a = 0, total_b = 0;
  for (auto c : d.histograms.counts_a) total_a += c;
  for (auto c : d.histograms.counts_b) total_b += c;
  EXPECT_EQ(total_a, 300u);
  EXPECT_EQ(total_b, 200u);
}

TEST(DistributionShift, CsvLayoutAndErrors) {
  const auto d = distribution_shift({0.0, 1.0}, {0.5}, 4);
  const std::string csv = d.histograms.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "bin_lo,bin_hi,count_a,count_b");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("0,0.25,1,0\n"), std::string::npos);
  EXPECT_TRUE(throws_code(ErrorCode::EmptyInput, [] { distribution_shift({}, {1.0}); }));
  EXPECT_TRUE(throws_code(ErrorCode::EmptyInput, [] { distribution_shift({1.0}, {}); }));
}

}  // namespace
}  // namespace rectconv

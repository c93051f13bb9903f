#pragma once

// Segmentation (mIoU, pixel accuracy), point-annotated detection (P/R/F1)
// and output-distribution comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "rectconv/box.hpp"
#include "rectconv/error.hpp"
#include "rectconv/image_io.hpp"

namespace rectconv {

// Rows are ground truth, columns predictions. Pixels whose ground truth is the
// ignore label are skipped. Predictions equal to the ignore label (e.g. areas
// a pipeline could not cover) are counted as misses of the true class in a
// separate per-class tally.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_classes, std::optional<std::int32_t> ignore_label = std::nullopt)
      : n_(n_classes), ignore_(ignore_label) {
    if (n_classes < 1) fail(ErrorCode::InvalidArgument, "need at least one class");
    if (ignore_ && *ignore_ >= 0 && *ignore_ < n_classes) {
      fail(ErrorCode::InvalidArgument, "ignore label collides with a class id");
    }
    counts_.assign(static_cast<std::size_t>(n_) * n_, 0);
    unmatched_.assign(static_cast<std::size_t>(n_), 0);
  }

  int n_classes() const { return n_; }
  std::optional<std::int32_t> ignore_label() const { return ignore_; }
  std::uint64_t count(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::uint64_t unmatched(int gt) const { return unmatched_[static_cast<std::size_t>(gt)]; }

  // Pixels that entered the statistics.
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    for (auto c : unmatched_) t += c;
    return t;
  }

  void add(std::int32_t gt, std::int32_t pred) {
    if (ignore_ && gt == *ignore_) return;
    check_label(gt, "ground truth");
    if (ignore_ && pred == *ignore_) {
      ++unmatched_[static_cast<std::size_t>(gt)];
      return;
    }
    check_label(pred, "prediction");
    ++counts_[static_cast<std::size_t>(gt) * n_ + pred];
  }

  void accumulate(const LabelMap& gt, const LabelMap& pred) {
    if (gt.width != pred.width || gt.height != pred.height) {
      fail(ErrorCode::ShapeMismatch, "ground truth and prediction sizes differ");
    }
    for (std::size_t i = 0; i < gt.labels.size(); ++i) add(gt.labels[i], pred.labels[i]);
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_ != n_ || other.ignore_ != ignore_) {
      fail(ErrorCode::ShapeMismatch, "cannot merge confusion matrices with different settings");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    for (std::size_t i = 0; i < unmatched_.size(); ++i) unmatched_[i] += other.unmatched_[i];
  }

  struct ClassStats {
    std::uint64_t tp = 0, fp = 0, fn = 0;
  };
  ClassStats stats(int c) const {
    ClassStats s;
    s.tp = count(c, c);
    for (int k = 0; k < n_; ++k) {
      if (k == c) continue;
      s.fn += count(c, k);
      s.fp += count(k, c);
    }
    s.fn += unmatched(c);
    return s;
  }

  // Per-class IoU in [0, 1]; nullopt for classes absent from both maps.
  std::optional<double> iou(int c) const {
    const auto s = stats(c);
    const std::uint64_t denom = s.tp + s.fp + s.fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(s.tp) / static_cast<double>(denom);
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  void check_label(std::int32_t l, const char* what) const {
    if (l < 0 || l >= n_) {
      fail(ErrorCode::LabelOutOfRange, std::string(what) + " label " + std::to_string(l) +
                                           " outside [0, " + std::to_string(n_) + ")");
    }
  }

  int n_;
  std::optional<std::int32_t> ignore_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> unmatched_;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& gt, const LabelMap& pred) {
  cm.accumulate(gt, pred);
  return cm;
}

// Mean IoU in percent over classes present in ground truth or prediction.
inline double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < cm.n_classes(); ++c) {
    if (auto v = cm.iou(c)) {
      sum += *v;
      ++present;
    }
  }
  if (present == 0) fail(ErrorCode::EmptyEvaluation, "no pixels were evaluated");
  return 100.0 * sum / present;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) fail(ErrorCode::EmptyEvaluation, "no pixels were evaluated");
  std::uint64_t trace = 0;
  for (int c = 0; c < cm.n_classes(); ++c) trace += cm.count(c, c);
  return 100.0 * static_cast<double>(trace) / static_cast<double>(total);
}

// --- Point-annotated detection -----------------------------------------------------

struct PointGT {
  double u = 0.0;
  double v = 0.0;
};

struct DetectionScore {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // percent
};

inline void finish_scores(DetectionScore& s) {
  s.precision = s.tp + s.fp ? 100.0 * static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn ? 100.0 * static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 0.0;
  s.f1 = s.tp ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
}

// Greedy one-to-one matching per image. Predictions with score below the
// threshold are dropped; the rest are visited by descending score (ties by
// lower index). A prediction is a true positive when it contains an unmatched
// ground-truth point; it claims the one closest to its centre (ties by lower
// index).
inline DetectionScore point_detection_prf(const std::vector<std::vector<BoxDet>>& preds,
                                          const std::vector<std::vector<PointGT>>& gts,
                                          double score_threshold = 0.5) {
  if (preds.size() != gts.size()) {
    fail(ErrorCode::ShapeMismatch, "prediction and ground-truth image counts differ");
  }
  DetectionScore s;
  for (std::size_t img = 0; img < preds.size(); ++img) {
    const auto& boxes = preds[img];
    const auto& points = gts[img];
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (boxes[i].score >= score_threshold) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
    std::vector<bool> taken(points.size(), false);
    for (std::size_t i : order) {
      const auto& box = boxes[i];
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < points.size(); ++g) {
        if (taken[g] || !box.contains(points[g].u, points[g].v)) continue;
        const double d = std::hypot(points[g].u - box.center_u(), points[g].v - box.center_v());
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        taken[static_cast<std::size_t>(best)] = true;
        ++s.tp;
      } else {
        ++s.fp;
      }
    }
    s.fn += static_cast<std::uint64_t>(std::count(taken.begin(), taken.end(), false));
  }
  finish_scores(s);
  return s;
}

// Bounding boxes of the 4-connected components of `class_id` in a label map,
// each with score 1. Lets segmentation outputs be scored as detections.
inline std::vector<BoxDet> component_boxes(const LabelMap& labels, std::int32_t class_id,
                                           std::size_t min_pixels = 1) {
  std::vector<BoxDet> out;
  std::vector<std::uint8_t> seen(labels.labels.size(), 0);
  for (int y0 = 0; y0 < labels.height; ++y0) {
    for (int x0 = 0; x0 < labels.width; ++x0) {
      const std::size_t i0 = static_cast<std::size_t>(y0) * labels.width + x0;
      if (seen[i0] || labels.labels[i0] != class_id) continue;
      std::queue<std::pair<int, int>> q;
      q.push({x0, y0});
      seen[i0] = 1;
      int xmin = x0, xmax = x0, ymin = y0, ymax = y0;
      std::size_t n = 0;
      while (!q.empty()) {
        auto [x, y] = q.front();
        q.pop();
        ++n;
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        const int dx[] = {1, -1, 0, 0};
        const int dy[] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const int nx = x + dx[k], ny = y + dy[k];
          if (nx < 0 || ny < 0 || nx >= labels.width || ny >= labels.height) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * labels.width + nx;
          if (seen[j] || labels.labels[j] != class_id) continue;
          seen[j] = 1;
          q.push({nx, ny});
        }
      }
      if (n < min_pixels) continue;
      out.push_back({xmin - 0.5, ymin - 0.5, xmax + 0.5, ymax + 0.5, 1.0, class_id});
    }
  }
  return out;
}

// --- Output distribution comparison --------------------------------------------------

struct HistogramPair {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::uint64_t> counts_a;
  std::vector<std::uint64_t> counts_b;

  double bin_width() const { return (hi - lo) / static_cast<double>(counts_a.size()); }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "bin_lo,bin_hi,count_a,count_b\n";
    for (std::size_t i = 0; i < counts_a.size(); ++i) {
      out << lo + i * bin_width() << "," << lo + (i + 1) * bin_width() << "," << counts_a[i] << ","
          << counts_b[i] << "\n";
    }
    return out.str();
  }
};

struct DistributionShift {
  double mean_shift = 0.0;    // mean(b) - mean(a)
  double median_shift = 0.0;  // median(b) - median(a)
  double ks_statistic = 0.0;  // two-sample Kolmogorov-Smirnov
  HistogramPair histograms;
};

namespace detail {

inline double median_sorted(const std::vector<double>& s) {
  const std::size_t n = s.size();
  return n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

}  // namespace detail

inline DistributionShift distribution_shift(std::vector<double> a, std::vector<double> b, int bins = 64) {
  if (a.empty() || b.empty()) fail(ErrorCode::EmptyInput, "distribution comparison needs two nonempty samples");
  if (bins < 1) fail(ErrorCode::InvalidArgument, "need at least one bin");
  for (const auto* s : {&a, &b}) {
    for (double v : *s) {
      if (!std::isfinite(v)) fail(ErrorCode::NonConvergence, "non-finite sample value");
    }
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  DistributionShift out;
  auto mean = [](const std::vector<double>& s) {
    long double t = 0.0L;
    for (double v : s) t += v;
    return static_cast<double>(t / static_cast<long double>(s.size()));
  };
  out.mean_shift = mean(b) - mean(a);
  out.median_shift = detail::median_sorted(b) - detail::median_sorted(a);

  // Largest gap between the empirical CDFs, evaluated after every distinct value.
  std::size_t i = 0, j = 0;
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  while (i < a.size() || j < b.size()) {
    double x;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j])) x = a[i]; else x = b[j];
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    out.ks_statistic = std::max(out.ks_statistic, std::abs(i / na - j / nb));
  }

  auto& h = out.histograms;
  h.lo = std::min(a.front(), b.front());
  h.hi = std::max(a.back(), b.back());
  if (!(h.hi > h.lo)) h.hi = h.lo + 1.0;
  h.counts_a.assign(static_cast<std::size_t>(bins), 0);
  h.counts_b.assign(static_cast<std::size_t>(bins), 0);
  auto bin_of = [&](double v) {
    const auto k = static_cast<long>(std::floor((v - h.lo) / (h.hi - h.lo) * bins));
    return static_cast<std::size_t>(std::clamp(k, 0L, static_cast<long>(bins - 1)));
  };
  for (double v : a) ++h.counts_a[bin_of(v)];
  for (double v : b) ++h.counts_b[bin_of(v)];
  return out;
}

// --- Paired output agreement ---------------------------------------------------------

// Linear-interpolation quantile of a sorted sample, q in [0, 1].
inline double quantile_sorted(const std::vector<double>& s, double q) {
  if (s.empty()) fail(ErrorCode::EmptyInput, "quantile of an empty sample");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Spearman rank correlation; 0 when either sample is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "rank correlation needs paired samples");
  if (a.empty()) fail(ErrorCode::EmptyInput, "rank correlation of empty samples");
  return pearson(average_ranks(a), average_ranks(b));
}

struct PairedAgreement {
  double median_abs_error = 0.0;  // median |b - a|
  double iqr_a = 0.0;             // inter-quartile range of a
  double spearman = 0.0;
  std::size_t count = 0;
};

inline PairedAgreement paired_agreement(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "paired samples differ in length");
  if (a.empty()) fail(ErrorCode::EmptyInput, "no paired samples");
  PairedAgreement out;
  out.count = a.size();
  std::vector<double> err(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) err[i] = std::abs(b[i] - a[i]);
  std::sort(err.begin(), err.end());
  out.median_abs_error = detail::median_sorted(err);
  std::vector<double> sa = a;
  std::sort(sa.begin(), sa.end());
  out.iqr_a = quantile_sorted(sa, 0.75) - quantile_sorted(sa, 0.25);
  out.spearman = spearman(a, b);
  return out;
}

}  // namespace rectconv

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails. Runtime budgets are part of each
// criterion.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rectconv/rectconv.hpp"

namespace fs = std::filesystem;
using namespace rectconv;

namespace {

std::string g_data = std::string(RECTCONV_SOURCE_DIR) + "/data";
std::string g_artifacts;

std::string data(const std::string& rel) { return g_data + "/" + rel; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor unit_image(const std::string& path) {
  Tensor t = read_image(path);
  for (auto& v : t.data()) v /= 255.0f;
  return t;
}

Tensor random_tensor(std::mt19937& rng, int n, int c, int h, int w, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor t(n, c, h, w);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

CameraIntrinsics make_camera(CameraModel model, int w, int h, double focal) {
  CameraIntrinsics in;
  in.model = model;
  in.width = w;
  in.height = h;
  in.cx = 0.5 * (w - 1);
  in.cy = 0.5 * (h - 1);
  in.focal = focal;
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
  return m;
}

// --- Camera round trip ------------------------------------------------------------------

Outcome camera_round_trip() {
  const std::vector<std::pair<const char*, CameraIntrinsics>> cams{
      {"fisheye", load_camera_intrinsics(data("cameras/fisheye_sample.json"))},
      {"pinhole", make_camera(CameraModel::Pinhole, 1280, 800, 400.0)},
      {"cylindrical", make_camera(CameraModel::Cylindrical, 1280, 800, 300.0)}};
  std::mt19937 rng(101);
  std::string detail;
  bool ok = true;
  for (const auto& [name, in] : cams) {
    const Camera cam(in);
    std::uniform_real_distribution<double> u(-0.5, in.width - 0.5), v(-0.5, in.height - 0.5);
    double worst = 0.0;
    int n = 0;
    while (n < 10000) {
      const double x = u(rng), y = v(rng);
      if (!cam.in_domain(x, y)) continue;
      const Pixel p = cam.project_to_2d(cam.project_to_3d(x, y));
      worst = std::max({worst, std::abs(p.x() - x), std::abs(p.y() - y)});
      ++n;
    }
    ok = ok && worst < 1e-6;
    detail += fmt("%s%s max err %.2e px", detail.empty() ? "" : ", ", name, worst);
  }
  return {ok, detail};
}

// --- Pinhole identity -------------------------------------------------------------------

Outcome pinhole_identity() {
  const CameraIntrinsics in = make_camera(CameraModel::Pinhole, 320, 240, 260.0);
  const Camera cam(in);
  double worst_offset = 0.0;
  for (int k : {3, 5, 7}) {
    for (int d : {1, 2}) {
      for (double scale : {1.0, 0.5, 0.25}) {
        const int h = static_cast<int>(std::lround(240 * scale)), w = static_cast<int>(std::lround(320 * scale));
        const OffsetField f = compute_offset_field(cam, k, d, scale, 1, h, w);
        for (float x : f.data()) worst_offset = std::max(worst_offset, double(std::abs(x)));
      }
    }
  }
  const NetworkSpec spec = segmentation_network(4, 8);
  const WeightStore w = random_weights(spec, 31);
  ConvertOptions o;
  o.input_height = 240;
  o.input_width = 320;
  const Conversion conv = convert_to_rectconv(spec, w, cam, o);
  const Executor plain(spec, w), converted(conv.spec, w, conv.fields);
  std::mt19937 rng(32);
  double worst_out = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor(rng, 1, 3, 240, 320, 0.0f, 1.0f);
    worst_out = std::max(worst_out, max_abs_diff(plain.run(x), converted.run(x)));
  }
  return {worst_offset < 1e-6 && worst_out < 1e-4 && !conv.report.empty(),
          fmt("max offset %.2e px over 18 configs, max output diff %.2e over 20 images (%zu layers converted)",
              worst_offset, worst_out, conv.report.size())};
}

// --- Zero-offset equivalence ------------------------------------------------------------

Outcome zero_offset_equivalence() {
  std::mt19937 rng(7);
  std::uniform_int_distribution<int> kd(0, 3), sd(1, 2), pd(0, 3), dd(1, 2), cd(1, 4), hd(4, 12);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 * kd(rng) + 1, d = dd(rng);
    ConvParams p;
    p.in_channels = cd(rng);
    p.out_channels = cd(rng);
    p.kernel_k = k;
    p.stride = sd(rng);
    p.padding = pd(rng);
    p.dilation = d;
    p.weights = random_tensor(rng, p.out_channels, p.in_channels, k, k, -0.5f, 0.5f);
    if (trial % 2) {
      std::uniform_real_distribution<float> b(-0.1f, 0.1f);
      p.bias = std::vector<float>(static_cast<std::size_t>(p.out_channels));
      for (auto& v : *p.bias) v = b(rng);
    }
    const Tensor x = random_tensor(rng, 1, p.in_channels, hd(rng) + d * (k - 1), hd(rng) + d * (k - 1), -1, 1);
    const OffsetField zero(k, d, 1 + trial % 3, 1.0, p.output_height(x.h()), p.output_width(x.w()));
    worst = std::max(worst, max_abs_diff(rectconv2d(x, p, zero), conv2d(x, p)));
  }
  return {worst < 1e-5, fmt("max diff %.2e over 200 random layers", worst)};
}

// --- Warp equivalence and distribution shift --------------------------------------------

struct WarpStudy {
  PairedAgreement rect;
  PairedAgreement plain;
  DistributionShift shift;
  std::size_t images = 0;
};

WarpStudy warp_study(const std::string& camera_file, bool with_plain_contrast) {
  const NetworkSpec spec = load_network(data("networks/probe.json"));
  const WeightStore w = load_weights(data("networks/probe.rcwt"), spec);
  const CameraIntrinsics ci = load_camera_intrinsics(data(camera_file));
  const Camera cam(ci);
  ConvertOptions o;
  o.input_height = cam.height();
  o.input_width = cam.width();
  const Conversion conv = convert_to_rectconv(spec, w, cam, o);
  const Executor plain(spec, w), converted(conv.spec, w, conv.fields);

  std::vector<double> a, b, a_plain, b_plain;
  WarpStudy s;
  for (int i = 0; i < 20; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "images/perspective/view_%02d.png", i);
    const Tensor img = unit_image(data(name));
    Projection proj;
    proj.focal = ci.model == CameraModel::FisheyePoly4 ? ci.poly[0] : ci.focal;
    proj.out_width = img.w();
    proj.out_height = img.h();
    const WarpPairs p = warp_pairs(plain, converted, cam, proj, img);
    a.insert(a.end(), p.a.begin(), p.a.end());
    b.insert(b.end(), p.b.begin(), p.b.end());
    if (with_plain_contrast) {
      const WarpPairs q = warp_pairs(plain, plain, cam, proj, img);
      a_plain.insert(a_plain.end(), q.a.begin(), q.a.end());
      b_plain.insert(b_plain.end(), q.b.begin(), q.b.end());
    }
    ++s.images;
  }
  s.rect = paired_agreement(a, b);
  if (with_plain_contrast) s.plain = paired_agreement(a_plain, b_plain);
  s.shift = distribution_shift(a, b, 64);
  return s;
}

const WarpStudy& fisheye_study() {
  static const WarpStudy s = warp_study("cameras/fisheye_probe.json", true);
  return s;
}

Outcome warp_equivalence() {
  const WarpStudy& s = fisheye_study();
  const double ratio = s.rect.median_abs_error / s.rect.iqr_a;
  return {ratio < 0.15 && s.rect.spearman > 0.9,
          fmt("%zu pairs from %zu images: median|B-A|/IQR(A) = %.4f (< 0.15), Spearman = %.4f (> 0.9); "
              "plain conv on the warped image: %.4f, %.4f",
              s.rect.count, s.images, ratio, s.rect.spearman, s.plain.median_abs_error / s.plain.iqr_a,
              s.plain.spearman)};
}

Outcome distribution_shift_check() {
  const WarpStudy& fish = fisheye_study();
  const WarpStudy pin = warp_study("cameras/pinhole_probe.json", false);
  if (!g_artifacts.empty()) {
    fs::create_directories(g_artifacts);
    write_text_atomic(g_artifacts + "/bias_fisheye_histograms.csv", fish.shift.histograms.to_csv());
    write_text_atomic(g_artifacts + "/bias_pinhole_histograms.csv", pin.shift.histograms.to_csv());
  }
  return {fish.shift.mean_shift != 0.0 && std::abs(pin.shift.mean_shift) < 1e-3,
          fmt("fisheye mean shift %.3e (KS %.4f), pinhole mean shift %.3e (|.| < 1e-3)", fish.shift.mean_shift,
              fish.shift.ks_statistic, pin.shift.mean_shift)};
}

// --- Scale rule -------------------------------------------------------------------------

Outcome scale_rule() {
  // A half-scale kernel covers the same input footprint as a full-scale one
  // with twice the dilation, centred on the same input pixel.
  const Camera cam(load_camera_intrinsics(data("cameras/fisheye_sample.json")));
  double worst = 0.0;
  int n = 0;
  for (int y = 0; y < 400; y += 7) {
    for (int x = 0; x < 640; x += 7) {
      if (!cam.in_domain(2.0 * x, 2.0 * y)) continue;
      const auto half = kernel_offsets_at(cam, x, y, 3, 1, 0.5);
      const auto full = kernel_offsets_at(cam, 2.0 * x, 2.0 * y, 3, 2, 1.0);
      for (std::size_t t = 0; t < half.data.size(); ++t) {
        const double want = 0.5 * full.data[t];
        worst = std::max(worst, std::abs(half.data[t] - want) / std::max(1.0, std::abs(want)));
      }
      ++n;
    }
  }
  return {worst < 1e-6, fmt("max relative deviation %.2e over %d centres", worst, n)};
}

// --- Subsampled field fidelity ----------------------------------------------------------

Outcome subsampled_fidelity() {
  const Camera cam(load_camera_intrinsics(data("cameras/fisheye_sample.json")));
  const int h = cam.height(), w = cam.width();
  const OffsetField dense = compute_offset_field(cam, 3, 1, 1.0, 1, h, w);
  std::vector<double> errors;
  std::vector<float> buf(dense.block_size());
  // Where the stride-8 error exceeds the bound, for the report only.
  int over = 0;
  double worst_within = 0.0, nearest_over = std::numeric_limits<double>::infinity();
  for (int gs : {16, 8, 4, 2, 1}) {
    const OffsetField sub = compute_offset_field(cam, 3, 1, 1.0, gs, h, w);
    double worst = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        interpolate_offsets(sub, x, y, buf);
        const auto ref = dense.block(y, x);
        double e = 0.0;
        for (std::size_t t = 0; t < buf.size(); ++t) e = std::max(e, std::abs(double(buf[t]) - ref[t]));
        worst = std::max(worst, e);
        if (gs != 8) continue;
        const auto& in = cam.intrinsics();
        const double r = std::hypot(x - in.cx, y - in.cy) / cam.r_max();
        if (r < 0.99) worst_within = std::max(worst_within, e);
        if (e >= 0.25) {
          ++over;
          nearest_over = std::min(nearest_over, r);
        }
      }
    }
    errors.push_back(worst);
  }
  const bool monotone = std::is_sorted(errors.rbegin(), errors.rend());
  std::string detail = fmt("max error by stride 16/8/4/2/1: %.4f / %.4f / %.4f / %.4f / %.4f px (%s)", errors[0],
                           errors[1], errors[2], errors[3], errors[4], monotone ? "monotone" : "not monotone");
  if (over > 0) {
    detail += fmt("; at stride 8, %d px exceed 0.25 px, all beyond %.4f r_max (dense field has %lld clamped taps), "
                  "max %.4f px inside 0.99 r_max",
                  over, nearest_over, static_cast<long long>(dense.clamped_taps), worst_within);
  }
  return {errors[1] < 0.25 && monotone, detail};
}

// --- Baseline ordering ------------------------------------------------------------------

Outcome baseline_ordering() {
  Bundle b;
  const NetworkSpec spec = load_network(data("networks/segmenter.json"));
  b.weights = load_weights(data("networks/segmenter.rcwt"), spec);
  b.camera = load_camera_intrinsics(data("cameras/fisheye_sample.json"));
  const Camera cam(b.camera);
  ConvertOptions o;
  o.input_height = cam.height();
  o.input_width = cam.width();
  const Conversion conv = convert_to_rectconv(spec, b.weights, cam, o);
  b.spec = conv.spec;
  b.fields = conv.fields;
  int convs = 0;
  for (const auto& n : spec.nodes) convs += n.is_conv();
  const Tensor image = unit_image(data("images/fisheye_sample.png"));
  BenchOptions opt;
  opt.patches = 4;
  const BenchResult r = run_benchmark(b, image, opt);
  const bool ordered = r.distorted.mean() < r.rectconv.mean() && r.rectconv.mean() < r.patches.mean();
  return {ordered && r.patch_count >= 4 && convs == 10,
          fmt("%s; %d patches, %d conv layers, %dx%d image", r.summary().c_str(), r.patch_count, convs, image.w(),
              image.h())};
}

// --- Metrics oracles --------------------------------------------------------------------

Outcome metrics_oracles() {
  std::mt19937 rng(909);
  bool ok = true;
  std::string first_failure;
  auto check = [&](bool cond, const std::string& what) {
    if (!cond && ok) first_failure = what;
    ok = ok && cond;
  };

  constexpr std::int32_t kIgnore = 255;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 4, w = 3 + trial % 7, h = 2 + trial % 5;
    std::uniform_int_distribution<int> lab(0, n);  // n stands for the ignore label
    LabelMap gt(w, h, 0), pred(w, h, 0);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const int g = lab(rng), p = lab(rng);
      gt.labels[i] = g == n ? kIgnore : g;
      pred.labels[i] = p == n ? kIgnore : p;
    }
    ConfusionMatrix cm(n, kIgnore);
    cm.accumulate(gt, pred);

    double iou_sum = 0.0;
    int present = 0;
    std::uint64_t correct = 0, counted = 0;
    for (int c = 0; c < n; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        const int g = gt.labels[i], p = pred.labels[i];
        if (g == kIgnore) continue;
        if (g == c && p == c) ++tp;
        if (g != c && p == c) ++fp;
        if (g == c && p != c) ++fn;
      }
      const auto s = cm.stats(c);
      check(s.tp == tp && s.fp == fp && s.fn == fn, fmt("confusion counts, trial %d class %d", trial, c));
      if (tp + fp + fn) {
        iou_sum += double(tp) / double(tp + fp + fn);
        ++present;
      }
    }
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (gt.labels[i] == kIgnore) continue;
      ++counted;
      correct += gt.labels[i] == pred.labels[i];
    }
    if (present == 0) continue;
    check(std::abs(miou(cm) - 100.0 * iou_sum / present) < 1e-9, fmt("MIOU, trial %d", trial));
    check(std::abs(pixel_accuracy(cm) - 100.0 * double(correct) / double(counted)) < 1e-9,
          fmt("accuracy, trial %d", trial));
  }

  // Detection scenes built cell by cell on a 10x10 grid of 20 px cells, so
  // each box can only reach points in its own cell and the expected outcome
  // is known by construction.
  for (int trial = 0; trial < 50; ++trial) {
    const double threshold = 0.5;
    std::vector<std::vector<BoxDet>> preds;
    std::vector<std::vector<PointGT>> gts;
    std::uint64_t tp = 0, fp = 0, fn = 0;
    std::uniform_int_distribution<int> kind(0, 5);
    std::uniform_real_distribution<double> jitter(-3.0, 3.0), high(0.5, 1.0), low(0.0, 0.49);
    const int images = 1 + trial % 3;
    for (int img = 0; img < images; ++img) {
      preds.emplace_back();
      gts.emplace_back();
      for (int cell = 0; cell < 100; ++cell) {
        const double cu = 20.0 * (cell % 10) + 10.0, cv = 20.0 * (cell / 10) + 10.0;
        const PointGT pt{cu + jitter(rng), cv + jitter(rng)};
        const BoxDet around{cu - 6, cv - 6, cu + 6, cv + 6, high(rng), 0};
        const BoxDet empty{cu - 9, cv - 9, cu - 7, cv - 7, high(rng), 0};
        switch (kind(rng)) {
          case 0:  // empty cell
            break;
          case 1:  // found
            gts.back().push_back(pt);
            preds.back().push_back(around);
            ++tp;
            break;
          case 2:  // missed
            gts.back().push_back(pt);
            ++fn;
            break;
          case 3:  // found twice: the second box is a false positive
            gts.back().push_back(pt);
            preds.back().push_back(around);
            preds.back().push_back(BoxDet{cu - 7, cv - 7, cu + 7, cv + 7, high(rng), 0});
            ++tp;
            ++fp;
            break;
          case 4:  // box misses the point
            gts.back().push_back(pt);
            preds.back().push_back(empty);
            ++fp;
            ++fn;
            break;
          case 5: {  // below threshold
            BoxDet weak = around;
            weak.score = low(rng);
            gts.back().push_back(pt);
            preds.back().push_back(weak);
            ++fn;
            break;
          }
        }
      }
      std::shuffle(preds.back().begin(), preds.back().end(), rng);
    }
    const DetectionScore s = point_detection_prf(preds, gts, threshold);
    check(s.tp == tp && s.fp == fp && s.fn == fn, fmt("detection counts, trial %d", trial));
    const double p = tp + fp ? 100.0 * tp / double(tp + fp) : 0.0;
    const double r = tp + fn ? 100.0 * tp / double(tp + fn) : 0.0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    check(std::abs(s.precision - p) < 1e-9 && std::abs(s.recall - r) < 1e-9 && std::abs(s.f1 - f) < 1e-9,
          fmt("detection ratios, trial %d", trial));
  }
  return {ok, ok ? "50 label-map and 50 detection scenarios match their oracles" : "mismatch: " + first_failure};
}

// --- Box back-projection bound ----------------------------------------------------------

BoxDet dense_boundary_hull(const Camera& cam, const BoxDet& box, int points) {
  const double uc = box.center_u(), vc = box.center_v();
  const TangentPatch patch = build_tangent_patch(cam, uc, vc, 3, 1);
  const double step = patch.s / 2.0;
  const double w = box.u_max - box.u_min, h = box.v_max - box.v_min, perimeter = 2 * (w + h);
  BoxDet out{1e18, 1e18, -1e18, -1e18};
  for (int i = 0; i < points; ++i) {
    double t = perimeter * i / points, du, dv;
    if (t < w) {
      du = box.u_min + t, dv = box.v_min;
    } else if ((t -= w) < h) {
      du = box.u_max, dv = box.v_min + t;
    } else if ((t -= h) < w) {
      du = box.u_max - t, dv = box.v_max;
    } else {
      du = box.u_min, dv = box.v_max - (t - w);
    }
    const Pixel px = cam.project_to_2d(patch.center + ((du - uc) * step) * patch.e1 + ((dv - vc) * step) * patch.e2);
    out.u_min = std::min(out.u_min, px.x());
    out.u_max = std::max(out.u_max, px.x());
    out.v_min = std::min(out.v_min, px.y());
    out.v_max = std::max(out.v_max, px.y());
  }
  return out;
}

Outcome box_backprojection_bound() {
  CameraIntrinsics in;
  in.model = CameraModel::FisheyePoly4;
  in.width = in.height = 800;
  in.cx = in.cy = 399.5;
  in.poly = {200.0, 0.0, 0.0, 0.0};
  const Camera cam(in);
  std::mt19937 rng(1010);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0, worst_size = 0.0, worst_radius = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double size = trial < 100 ? 80.0 : 4.0 + 76.0 * unit(rng);
    const double radius = 0.7 * cam.r_max() * std::sqrt(unit(rng)), phi = 2 * std::numbers::pi * unit(rng);
    const double uc = in.cx + radius * std::cos(phi), vc = in.cy + radius * std::sin(phi);
    const BoxDet box{uc - size / 2, vc - size / 2, uc + size / 2, vc + size / 2};
    const BoxDet quick = backproject_box(cam, box).box;
    const BoxDet dense = dense_boundary_hull(cam, box, 1000);
    const double gap = std::max({std::abs(quick.u_min - dense.u_min), std::abs(quick.u_max - dense.u_max),
                                 std::abs(quick.v_min - dense.v_min), std::abs(quick.v_max - dense.v_max)});
    if (gap > worst) {
      worst = gap;
      worst_size = size;
      worst_radius = radius / cam.r_max();
    }
  }
  return {worst < 2.0, fmt("worst hull gap %.2f px (< 2) for a %.0f px box at %.2f r_max; 1000 boxes", worst,
                           worst_size, worst_radius)};
}

// --- File formats -----------------------------------------------------------------------

template <typename Fn>
bool rejects_with(ErrorCode code, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

Outcome format_round_trips() {
  const std::string dir = (fs::temp_directory_path() / ("rectconv-acceptance-" + std::to_string(std::random_device{}()))).string();
  fs::create_directories(dir);
  std::vector<std::string> failed;
  auto check = [&](bool cond, const char* what) {
    if (!cond) failed.emplace_back(what);
  };
  try {
    const Camera cam(load_camera_intrinsics(data("cameras/fisheye_sample.json")));
    const OffsetField field = compute_offset_field(cam, 5, 2, 0.5, 4, 400, 640);
    const std::string rcof = dir + "/f.rcof";
    save_field(field, rcof);
    const auto rcof_bytes = read_file_bytes(rcof);
    const OffsetField back = load_field(rcof);
    check(encode_field(back) == rcof_bytes && back.data() == field.data(), "RCOF round trip");
    save_field(back, dir + "/f2.rcof");
    check(read_file_bytes(dir + "/f2.rcof") == rcof_bytes, "RCOF re-save");

    auto mutate = [&](const std::vector<std::uint8_t>& bytes, auto&& edit) {
      auto copy = bytes;
      edit(copy);
      write_file_atomic(dir + "/bad", copy);
      return dir + "/bad";
    };
    check(rejects_with(ErrorCode::FormatVersionMismatch,
                       [&] { load_field(mutate(rcof_bytes, [](auto& b) { b[0] ^= 0xff; })); }),
          "RCOF bad magic");
    check(rejects_with(ErrorCode::ChecksumMismatch,
                       [&] { load_field(mutate(rcof_bytes, [](auto& b) { b[b.size() / 2] ^= 0x01; })); }),
          "RCOF flipped payload bit");
    for (std::size_t keep : {std::size_t{6}, rcof_bytes.size() / 2, rcof_bytes.size() - 1}) {
      bool ok = false;
      try {
        load_field(mutate(rcof_bytes, [&](auto& b) { b.resize(keep); }));
      } catch (const Error& e) {
        ok = e.code() == ErrorCode::FormatVersionMismatch || e.code() == ErrorCode::ChecksumMismatch;
      }
      check(ok, "RCOF truncation");
    }

    const NetworkSpec spec = load_network(data("networks/segmenter.json"));
    const WeightStore weights = random_weights(spec, 77);
    const std::string rcwt = dir + "/w.rcwt";
    save_weights(weights, rcwt);
    const auto rcwt_bytes = read_file_bytes(rcwt);
    const WeightStore wback = load_weights(rcwt, spec);
    check(encode_weights(wback) == rcwt_bytes, "RCWT round trip");
    check(rejects_with(ErrorCode::FormatVersionMismatch,
                       [&] { load_weights(mutate(rcwt_bytes, [](auto& b) { b[1] ^= 0xff; }), spec); }),
          "RCWT bad magic");
    check(rejects_with(ErrorCode::ChecksumMismatch,
                       [&] { load_weights(mutate(rcwt_bytes, [](auto& b) { b[b.size() / 3] ^= 0x40; }), spec); }),
          "RCWT flipped payload bit");
    check(rejects_with(ErrorCode::ChecksumMismatch,
                       [&] { load_weights(mutate(rcwt_bytes, [](auto& b) { b.resize(b.size() - 9); }), spec); }),
          "RCWT truncation");

    const std::string net = dir + "/net.json";
    save_network(spec, net);
    const auto net_bytes = read_file_bytes(net);
    check(load_network(net) == spec, "network round trip");
    save_network(load_network(net), dir + "/net2.json");
    check(read_file_bytes(dir + "/net2.json") == net_bytes, "network re-save");
    check(rejects_with(ErrorCode::Parse, [&] { parse_network("{\"format\": \"rectconv-network\", \"nodes\": ["); }),
          "network truncated JSON");
    std::string text(net_bytes.begin(), net_bytes.end());
    const auto pos = text.find("\"Conv\"");
    check(pos != std::string::npos &&
              rejects_with(ErrorCode::UnknownKind, [&] { parse_network(text.replace(pos, 6, "\"ConvTranspose\"")); }),
          "network unknown layer kind");
  } catch (const Error& e) {
    failed.push_back(std::string("unexpected error: ") + e.what());
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  if (failed.empty()) return {true, "RCOF, RCWT and network files re-save byte-identically; 10 corruptions rejected"};
  std::string msg = "failed:";
  for (const auto& f : failed) msg += " [" + f + "]";
  return {false, msg};
}

struct Criterion {
  const char* id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  app.set_help_flag("--help", "print this help message and exit");
  std::vector<std::string> only;
  app.add_option("--only", only, "run only these criteria (e.g. AC-4)")->delimiter(',');
  app.add_option("--data", g_data, "sample data directory")->check(CLI::ExistingDirectory)->capture_default_str();
  app.add_option("--artifacts", g_artifacts, "directory for histogram CSVs");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"AC-1", "camera round trip", 5, camera_round_trip},
      {"AC-2", "pinhole identity", 60, pinhole_identity},
      {"AC-3", "zero-offset convolution equivalence", 60, zero_offset_equivalence},
      {"AC-4", "warp equivalence", 300, warp_equivalence},
      {"AC-5", "output distribution shift", 300, distribution_shift_check},
      {"AC-6", "scale rule", 30, scale_rule},
      {"AC-7", "subsampled field fidelity", 120, subsampled_fidelity},
      {"AC-8", "baseline runtime ordering", 300, baseline_ordering},
      {"AC-9", "metrics oracles", 10, metrics_oracles},
      {"AC-10", "box back-projection bound", 30, box_backprojection_bound},
      {"AC-11", "format round trips", 10, format_round_trips},
  };
  const std::set<std::string> selected(only.begin(), only.end());
  for (const auto& id : selected) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return id == c.id; })) {
      std::cerr << "unknown criterion '" << id << "'\n";
      return 1;
    }
  }

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
              << fmt("  [%.2f s of %.0f s%s]", secs, c.budget_s, in_time ? "" : ", over budget") << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

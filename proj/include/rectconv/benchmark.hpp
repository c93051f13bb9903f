#pragma once

// Inference timing of the three fisheye pipelines on one image: the plain
// network on the raw image, patch-wise rectification, and the converted
// network. Field construction and file loading happen before timing starts.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "rectconv/bundle.hpp"
#include "rectconv/network.hpp"
#include "rectconv/rectify.hpp"

namespace rectconv {

struct BenchOptions {
  int warmup = 3;
  int repeats = 10;
  int patches = 4;
  double patch_fov_deg = 0.0;
  double overlap = 16.0;
};

struct BenchTiming {
  std::string method;
  std::vector<double> seconds;
  double mean() const {
    double t = 0.0;
    for (double s : seconds) t += s;
    return seconds.empty() ? 0.0 : t / static_cast<double>(seconds.size());
  }
};

struct BenchResult {
  BenchTiming distorted{"Conv(Distorted)", {}};
  BenchTiming patches{"Conv(Patches)", {}};
  BenchTiming rectconv{"RectConv", {}};
  int patch_count = 0;

  static double increase(double t, double base) { return 100.0 * (t / base - 1.0); }

  std::string summary() const {
    const double base = distorted.mean();
    char buf[256];
    std::snprintf(buf, sizeof buf, "Conv(Distorted) %.2f / Conv(Patches) %.2f (%.0f%%) / RectConv %.2f (%.0f%%)",
                  base, patches.mean(), increase(patches.mean(), base), rectconv.mean(),
                  increase(rectconv.mean(), base));
    return buf;
  }
};

// Copy of a converted network with every RectConv node turned back into a
// plain convolution over the same weights.
inline NetworkSpec plain_network(NetworkSpec spec) {
  for (auto& n : spec.nodes) {
    if (n.kind == NodeKind::RectConv) {
      n.kind = NodeKind::Conv;
      n.params.field.clear();
    }
  }
  return spec;
}

inline BenchResult run_benchmark(const Bundle& bundle, const Tensor& image, const BenchOptions& opt) {
  if (opt.warmup < 0 || opt.repeats < 1) fail(ErrorCode::InvalidArgument, "need warmup >= 0 and repeats >= 1");
  const Camera cam(bundle.camera);
  const Executor plain(plain_network(bundle.spec), bundle.weights);
  const Executor converted(bundle.spec, bundle.weights, bundle.fields);
  const PatchPlan plan = make_patch_plan(cam, opt.patches, opt.patch_fov_deg, opt.overlap);

  BenchResult r;
  r.patch_count = static_cast<int>(plan.patches.size());
  auto time = [&](BenchTiming& t, auto&& fn) {
    for (int i = 0; i < opt.warmup; ++i) fn();
    for (int i = 0; i < opt.repeats; ++i) {
      const auto start = std::chrono::steady_clock::now();
      fn();
      t.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
  };
  time(r.distorted, [&] { (void)plain.run(image); });
  time(r.patches, [&] { (void)patch_inference(plain, cam, image, plan); });
  time(r.rectconv, [&] { (void)converted.run(image); });
  return r;
}

}  // namespace rectconv

#pragma once

// Paired comparison of a standard network on a perspective image against its
// converted counterpart on the same image warped into the camera. Every output
// location of the perspective network is mapped through the camera to the
// corresponding location of the converted network's output, which is sampled
// bilinearly there.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rectconv/camera.hpp"
#include "rectconv/network.hpp"
#include "rectconv/rectify.hpp"

namespace rectconv {

// Half-width, in input pixels, of the region that can influence one output
// value of the first Output node.
inline double receptive_radius(const NetworkSpec& spec) {
  const ScaleTrace scales = scale_trace(spec);
  std::vector<double> reach(spec.nodes.size(), 0.0);
  double result = 0.0;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const Node& n = spec.nodes[i];
    double r = 0.0;
    for (const auto& in : n.inputs) r = std::max(r, reach[spec.index_of(in)]);
    const NodeScale& s = scales.at(n.name);
    switch (n.kind) {
      case NodeKind::Conv:
      case NodeKind::RectConv:
        r += 0.5 * (n.params.kernel - 1) * n.params.dilation / s.input_scale;
        break;
      case NodeKind::MaxPool:
      case NodeKind::AvgPool:
        r += 0.5 * (n.params.kernel - 1) / s.input_scale;
        break;
      case NodeKind::UpsampleBilinear:
        r += 1.0 / s.input_scale;
        break;
      default:
        break;
    }
    reach[i] = r;
    if (n.kind == NodeKind::Output && result == 0.0) result = r;
  }
  return result;
}

// Square erosion: a pixel survives only if every pixel within `radius`
// (Chebyshev distance) is set.
inline Mask erode_mask(const Mask& m, int radius) {
  if (radius <= 0) return m;
  const int w = m.width, h = m.height;
  auto run_min = [radius](const std::vector<std::uint8_t>& in, int n, int stride, int count, int step,
                          std::vector<std::uint8_t>& out) {
    for (int line = 0; line < count; ++line) {
      const std::size_t base = static_cast<std::size_t>(line) * step;
      // Distance to the nearest unset pixel at or before / after each index.
      int last_zero = -radius - 1;
      std::vector<int> before(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        if (!in[base + static_cast<std::size_t>(i) * stride]) last_zero = i;
        before[static_cast<std::size_t>(i)] = last_zero;
      }
      int next_zero = n + radius + 1;
      for (int i = n - 1; i >= 0; --i) {
        if (!in[base + static_cast<std::size_t>(i) * stride]) next_zero = i;
        const bool ok = i - before[static_cast<std::size_t>(i)] > radius && next_zero - i > radius &&
                        i - radius >= 0 && i + radius < n;
        out[base + static_cast<std::size_t>(i) * stride] = ok ? 1 : 0;
      }
    }
  };
  std::vector<std::uint8_t> rows(m.valid.size()), both(m.valid.size());
  run_min(m.valid, w, 1, h, w, rows);
  run_min(rows, h, w, w, 1, both);
  Mask out(w, h, 0);
  out.valid = std::move(both);
  return out;
}

struct WarpPairs {
  std::vector<double> a;  // perspective network outputs
  std::vector<double> b;  // converted network outputs at the corresponding points
  std::size_t locations = 0;
  std::vector<Pixel> points;  // camera pixel of each location; pairs are grouped by location
};

// `conv` runs on `image` (sized to `proj`); `rect` runs on the image warped
// into `cam`. A location is used only when the converted network's whole
// receptive field around it lies on valid warped pixels.
inline WarpPairs warp_pairs(const Executor& conv, const Executor& rect, const Camera& cam,
                            const Projection& proj, const Tensor& image) {
  const Resampled warped = distort_image(cam, proj, image);
  const Tensor out_a = conv.run(image);
  const Tensor out_b = rect.run(warped.image);
  if (out_a.c() != out_b.c()) fail(ErrorCode::ShapeMismatch, "networks disagree on output channels");

  auto output_frame = [](const NetworkSpec& spec, const Tensor& in) {
    const auto geo = trace_geometry(spec, in.c(), in.h(), in.w());
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
      if (spec.nodes[i].kind == NodeKind::Output) return geo[i].frame;
    }
    fail(ErrorCode::Parse, "network has no output node");
  };
  const FeatureFrame fa = output_frame(conv.spec(), image);
  const FeatureFrame fb = output_frame(rect.spec(), warped.image);

  const double reach = receptive_radius(rect.spec()) + 1.0 / fb.scale + 1.0;
  const Mask usable = erode_mask(warped.valid, static_cast<int>(std::ceil(reach)));

  WarpPairs pairs;
  for (int y = 0; y < out_a.h(); ++y) {
    for (int x = 0; x < out_a.w(); ++x) {
      const Pixel p = fa.to_input(x, y);
      const auto q = cam.try_project_to_2d(proj.ray(p.x(), p.y()));
      if (!q) continue;
      const int qu = static_cast<int>(std::lround(q->x()));
      const int qv = static_cast<int>(std::lround(q->y()));
      if (qu < 0 || qv < 0 || qu >= usable.width || qv >= usable.height || !usable.at(qu, qv)) continue;
      const double bx = (q->x() - fb.offset_u) * fb.scale;
      const double by = (q->y() - fb.offset_v) * fb.scale;
      if (!(bx >= 0.0 && by >= 0.0 && bx <= out_b.w() - 1.0 && by <= out_b.h() - 1.0)) continue;
      ++pairs.locations;
      pairs.points.push_back(*q);
      for (int c = 0; c < out_a.c(); ++c) {
        pairs.a.push_back(out_a.at(0, c, y, x));
        pairs.b.push_back(detail::sample_clamped(out_b.plane(0, c), out_b.h(), out_b.w(), by, bx));
      }
    }
  }
  return pairs;
}

}  // namespace rectconv

#pragma once

// Rectification baselines: resampling between a camera and a perspective or
// cylindrical projection, patch-wise rectified inference, and back-projection
// of locally rectified detection boxes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "rectconv/box.hpp"
#include "rectconv/camera.hpp"
#include "rectconv/error.hpp"
#include "rectconv/image_io.hpp"
#include "rectconv/network.hpp"
#include "rectconv/nn.hpp"
#include "rectconv/offset_field.hpp"
#include "rectconv/parallel.hpp"
#include "rectconv/tensor.hpp"

namespace rectconv {

enum class ProjectionKind { Perspective, Cylindrical };

// Virtual target view. The principal point defaults to the image centre;
// orientation maps view directions into the camera frame.
struct Projection {
  ProjectionKind kind = ProjectionKind::Perspective;
  double focal = 1.0;
  int out_width = 0;
  int out_height = 0;
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();
  std::optional<double> cx;
  std::optional<double> cy;

  double principal_u() const { return cx.value_or(0.5 * (out_width - 1)); }
  double principal_v() const { return cy.value_or(0.5 * (out_height - 1)); }

  void validate() const {
    if (!(focal > 0.0) || !std::isfinite(focal)) fail(ErrorCode::InvalidArgument, "projection focal must be > 0");
    if (out_width < 1 || out_height < 1) fail(ErrorCode::InvalidArgument, "projection size must be positive");
    const Eigen::Matrix3d e = orientation.transpose() * orientation - Eigen::Matrix3d::Identity();
    if (!(e.cwiseAbs().maxCoeff() <= 1e-9) || !(orientation.determinant() > 0.0)) {
      fail(ErrorCode::InvalidArgument, "projection orientation must be a rotation");
    }
  }

  // Viewing direction (camera frame) of output pixel (x, y).
  Point3 ray(double x, double y) const {
    const double dx = (x - principal_u()) / focal;
    const double dy = (y - principal_v()) / focal;
    Point3 local;
    if (kind == ProjectionKind::Perspective) {
      local = {dx, dy, 1.0};
    } else {
      local = {std::sin(dx), dy, std::cos(dx)};
    }
    return orientation * local;
  }

  // Output pixel of a camera-frame direction, if the view can represent it.
  std::optional<Pixel> project(const Point3& p) const {
    const Point3 q = orientation.transpose() * p;
    if (kind == ProjectionKind::Perspective) {
      if (!(q.z() > 0.0)) return std::nullopt;
      return Pixel(principal_u() + focal * q.x() / q.z(), principal_v() + focal * q.y() / q.z());
    }
    const double rho = std::hypot(q.x(), q.z());
    if (!(rho > 0.0)) return std::nullopt;
    return Pixel(principal_u() + focal * std::atan2(q.x(), q.z()), principal_v() + focal * q.y() / rho);
  }
};

// Rotation taking the optical axis to the direction with the given yaw
// (about the vertical axis) and pitch (positive looks down the +v axis).
inline Eigen::Matrix3d view_rotation(double yaw, double pitch) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(-pitch, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

// For every target pixel, the source coordinate it reads from.
struct SampleMap {
  int width = 0;
  int height = 0;
  std::vector<double> src_x;
  std::vector<double> src_y;
  Mask valid;
};

namespace detail {

inline double snap(double c) {
  const double r = std::round(c);
  return std::abs(c - r) < 1e-9 ? r : c;
}

inline bool inside(double x, double y, int w, int h) {
  return x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
}

template <typename SourceOf>
SampleMap build_map(int width, int height, int src_w, int src_h, SourceOf source_of) {
  SampleMap m;
  m.width = width;
  m.height = height;
  const std::size_t n = static_cast<std::size_t>(width) * height;
  m.src_x.assign(n, 0.0);
  m.src_y.assign(n, 0.0);
  m.valid = Mask(width, height, 0);
  parallel_for(0, static_cast<std::size_t>(height), [&](std::size_t y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = y * width + x;
      const std::optional<Pixel> s = source_of(x, static_cast<int>(y));
      if (!s) continue;
      const double sx = snap(s->x());
      const double sy = snap(s->y());
      if (!inside(sx, sy, src_w, src_h)) continue;
      m.src_x[i] = sx;
      m.src_y[i] = sy;
      m.valid.valid[i] = 1;
    }
  });
  return m;
}

inline float sample_clamped(std::span<const float> plane, int h, int w, double y, double x) {
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double ly = y - y0;
  const double lx = x - x0;
  auto at = [&](int yy, int xx) { return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + xx]); };
  const double v = (1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) +
                   ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1));
  return static_cast<float>(v);
}

}  // namespace detail

// Target = projection grid, source = camera image.
inline SampleMap rectify_map(const Camera& cam, const Projection& proj) {
  proj.validate();
  return detail::build_map(proj.out_width, proj.out_height, cam.width(), cam.height(),
                           [&](int x, int y) { return cam.try_project_to_2d(proj.ray(x, y)); });
}

// Target = camera grid, source = projection image.
inline SampleMap distort_map(const Camera& cam, const Projection& proj) {
  proj.validate();
  return detail::build_map(cam.width(), cam.height(), proj.out_width, proj.out_height,
                           [&](int u, int v) -> std::optional<Pixel> {
                             if (!cam.in_domain(u, v)) return std::nullopt;
                             return proj.project(cam.project_to_3d(u, v));
                           });
}

// Bilinear resampling of every channel; pixels without a source are zero.
inline Tensor remap_bilinear(const SampleMap& map, const Tensor& src) {
  if (src.n() != 1) fail(ErrorCode::ShapeMismatch, "remap expects a single image");
  Tensor out(1, src.c(), map.height, map.width);
  parallel_for(0, static_cast<std::size_t>(map.height), [&](std::size_t y) {
    for (int x = 0; x < map.width; ++x) {
      const std::size_t i = y * map.width + x;
      if (!map.valid.valid[i]) continue;
      for (int c = 0; c < src.c(); ++c) {
        out.at(0, c, static_cast<int>(y), x) =
            detail::sample_clamped(src.plane(0, c), src.h(), src.w(), map.src_y[i], map.src_x[i]);
      }
    }
  });
  return out;
}

// Nearest-neighbour resampling for categorical maps.
inline LabelMap remap_nearest(const SampleMap& map, const LabelMap& src, std::int32_t fill) {
  LabelMap out(map.width, map.height, fill);
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    if (!map.valid.valid[i]) continue;
    const int sx = std::clamp(static_cast<int>(std::lround(map.src_x[i])), 0, src.width - 1);
    const int sy = std::clamp(static_cast<int>(std::lround(map.src_y[i])), 0, src.height - 1);
    out.labels[i] = src.at(sx, sy);
  }
  return out;
}

struct Resampled {
  Tensor image;
  Mask valid;
};

inline void check_source(const Tensor& image, int w, int h, const char* what) {
  if (image.n() != 1 || image.w() != w || image.h() != h) {
    fail(ErrorCode::ShapeMismatch, std::string(what) + " image is " + shape_string(image) +
                                       ", expected 1xCx" + std::to_string(h) + "x" + std::to_string(w));
  }
}

inline Resampled rectify_image(const Camera& cam, const Projection& proj, const Tensor& image) {
  check_source(image, cam.width(), cam.height(), "camera");
  auto map = rectify_map(cam, proj);
  return {remap_bilinear(map, image), std::move(map.valid)};
}

inline Resampled distort_image(const Camera& cam, const Projection& proj, const Tensor& image) {
  check_source(image, proj.out_width, proj.out_height, "projection");
  auto map = distort_map(cam, proj);
  return {remap_bilinear(map, image), std::move(map.valid)};
}

inline LabelMap unrectify_labels(const Camera& cam, const Projection& proj, const LabelMap& pred,
                                 std::int32_t fill_value) {
  if (pred.width != proj.out_width || pred.height != proj.out_height) {
    fail(ErrorCode::ShapeMismatch, "label map does not match the projection size");
  }
  return remap_nearest(distort_map(cam, proj), pred, fill_value);
}

// Maps per-class scores from the projection grid back onto the camera grid.
// Score maps of a different size than the projection (strided networks) are
// addressed with half-pixel-centre scaling.
inline Resampled unrectify_logits(const Camera& cam, const Projection& proj, const Tensor& logits) {
  if (logits.n() != 1) fail(ErrorCode::ShapeMismatch, "expected a single score map");
  SampleMap map = distort_map(cam, proj);
  if (logits.w() != proj.out_width || logits.h() != proj.out_height) {
    const double rx = static_cast<double>(logits.w()) / proj.out_width;
    const double ry = static_cast<double>(logits.h()) / proj.out_height;
    for (std::size_t i = 0; i < map.src_x.size(); ++i) {
      if (!map.valid.valid[i]) continue;
      map.src_x[i] = std::clamp((map.src_x[i] + 0.5) * rx - 0.5, 0.0, logits.w() - 1.0);
      map.src_y[i] = std::clamp((map.src_y[i] + 0.5) * ry - 0.5, 0.0, logits.h() - 1.0);
    }
  }
  return {remap_bilinear(map, logits), std::move(map.valid)};
}

// Per-pixel argmax over channels; invalid pixels get fill_value.
inline LabelMap argmax_labels(const Tensor& scores, const Mask& valid, std::int32_t fill_value) {
  LabelMap out(scores.w(), scores.h(), fill_value);
  for (int y = 0; y < scores.h(); ++y) {
    for (int x = 0; x < scores.w(); ++x) {
      if (!valid.at(x, y)) continue;
      int best = 0;
      for (int c = 1; c < scores.c(); ++c) {
        if (scores.at(0, c, y, x) > scores.at(0, best, y, x)) best = c;
      }
      out.at(x, y) = best;
    }
  }
  return out;
}

// --- Patch-based inference ---------------------------------------------------------

struct PatchView {
  Projection projection;
  Point3 center_ray;
  double overlap = 0.0;  // feathering band, projection pixels
};

struct PatchPlan {
  std::vector<PatchView> patches;
};

namespace detail {

inline double yaw_of(const Point3& p) { return std::atan2(p.x(), p.z()); }
inline double pitch_of(const Point3& p) { return std::atan2(p.y(), std::hypot(p.x(), p.z())); }

// Focal length that keeps the patch resolution close to the camera's centre.
inline double native_focal(const Camera& cam) {
  const auto& in = cam.intrinsics();
  return in.model == CameraModel::FisheyePoly4 ? in.poly[0] : in.focal;
}

}  // namespace detail

// Tiles the camera's yaw/pitch extent with an n = rows x cols grid of
// perspective views (the factorisation closest to the extent's aspect ratio).
// Each view covers its cell widened by `overlap` pixels on every side;
// patch_fov_deg > 0 additionally enforces a minimum horizontal field of view.
inline PatchPlan make_patch_plan(const Camera& cam, int n_patches, double patch_fov_deg, double overlap) {
  if (n_patches < 1) fail(ErrorCode::InvalidArgument, "need at least one patch");
  if (!(overlap >= 0.0)) fail(ErrorCode::InvalidArgument, "overlap must be >= 0");
  const double f = detail::native_focal(cam);

  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin, pmin = ymin, pmax = -ymin;
  auto visit = [&](double u, double v) {
    if (!cam.in_domain(u, v)) return;
    const Point3 p = cam.project_to_3d(u, v);
    ymin = std::min(ymin, detail::yaw_of(p));
    ymax = std::max(ymax, detail::yaw_of(p));
    pmin = std::min(pmin, detail::pitch_of(p));
    pmax = std::max(pmax, detail::pitch_of(p));
  };
  const double w = cam.width() - 1.0, h = cam.height() - 1.0;
  for (int i = 0; i <= 512; ++i) {
    const double t = i / 512.0;
    visit(t * w, 0.0);
    visit(t * w, h);
    visit(0.0, t * h);
    visit(w, t * h);
  }
  if (!(ymax >= ymin)) fail(ErrorCode::OutOfDomain, "camera image has no valid border pixels");

  int rows = 1, cols = n_patches;
  double best = std::numeric_limits<double>::infinity();
  const double aspect = (ymax - ymin) / std::max(pmax - pmin, 1e-9);
  for (int r = 1; r <= n_patches; ++r) {
    if (n_patches % r) continue;
    const double err = std::abs(std::log((static_cast<double>(n_patches) / r) / r / aspect));
    if (err < best) {
      best = err;
      rows = r;
      cols = n_patches / r;
    }
  }

  const double margin = overlap / f;
  const double cell_y = (ymax - ymin) / cols;
  const double cell_p = (pmax - pmin) / rows;
  PatchPlan plan;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double yaw = ymin + (c + 0.5) * cell_y;
      const double pitch = pmin + (r + 0.5) * cell_p;
      Projection proj;
      proj.kind = ProjectionKind::Perspective;
      proj.focal = f;
      proj.orientation = view_rotation(yaw, pitch);
      double half_w = 0.0, half_h = 0.0;
      const double y0 = yaw - cell_y / 2 - margin, y1 = yaw + cell_y / 2 + margin;
      const double p0 = std::max(pitch - cell_p / 2 - margin, -std::numbers::pi / 2);
      const double p1 = std::min(pitch + cell_p / 2 + margin, std::numbers::pi / 2);
      for (int i = 0; i <= 64; ++i) {
        const double t = i / 64.0;
        for (auto [yy, pp] : {std::pair{y0 + t * (y1 - y0), p0}, std::pair{y0 + t * (y1 - y0), p1},
                              std::pair{y0, p0 + t * (p1 - p0)}, std::pair{y1, p0 + t * (p1 - p0)}}) {
          const Point3 dir(std::sin(yy) * std::cos(pp), std::sin(pp), std::cos(yy) * std::cos(pp));
          const Point3 q = proj.orientation.transpose() * dir;
          if (q.z() < 0.1) {
            fail(ErrorCode::InvalidArgument,
                 "patch cell too wide for a perspective view; use more patches");
          }
          half_w = std::max(half_w, std::abs(f * q.x() / q.z()));
          half_h = std::max(half_h, std::abs(f * q.y() / q.z()));
        }
      }
      if (patch_fov_deg > 0.0) {
        if (patch_fov_deg >= 179.0) fail(ErrorCode::InvalidArgument, "patch_fov must be below 179 degrees");
        half_w = std::max(half_w, f * std::tan(patch_fov_deg * std::numbers::pi / 360.0));
      }
      proj.out_width = 2 * static_cast<int>(std::ceil(half_w)) + 1;
      proj.out_height = 2 * static_cast<int>(std::ceil(half_h)) + 1;
      if (proj.out_width > 16384 || proj.out_height > 16384) {
        fail(ErrorCode::InvalidArgument, "patch too large; use more patches");
      }
      plan.patches.push_back({proj, proj.orientation.col(2), overlap});
    }
  }
  return plan;
}

struct SegPrediction {
  Tensor scores;  // 1 x classes x H x W on the camera grid
  Mask valid;
};

// Conv(Rectify): rectify, run the network, map scores back.
inline SegPrediction rectify_baseline(const Executor& net, const Camera& cam, const Projection& proj,
                                      const Tensor& image) {
  const Resampled rect = rectify_image(cam, proj, image);
  const Tensor out = net.run(rect.image);
  Resampled back = unrectify_logits(cam, proj, out);
  return {std::move(back.image), std::move(back.valid)};
}

// Conv(Patches): each view is rectified and inferred independently; scores
// are fused on the camera grid. A pixel's owner is the covering view whose
// centre ray is closest; other covering views within overlap/2 pixels of the
// ownership boundary blend in with a linear ramp.
inline SegPrediction patch_inference(const Executor& net, const Camera& cam, const Tensor& image,
                                     const PatchPlan& plan) {
  if (plan.patches.empty()) fail(ErrorCode::InvalidArgument, "empty patch plan");
  std::vector<Resampled> views;
  views.reserve(plan.patches.size());
  for (const auto& patch : plan.patches) {
    const Resampled rect = rectify_image(cam, patch.projection, image);
    views.push_back(unrectify_logits(cam, patch.projection, net.run(rect.image)));
  }
  const int classes = views.front().image.c();
  for (const auto& v : views) {
    if (v.image.c() != classes) fail(ErrorCode::ShapeMismatch, "patch outputs disagree on class count");
  }

  SegPrediction out{Tensor(1, classes, cam.height(), cam.width()), Mask(cam.width(), cam.height(), 0)};
  std::size_t gaps = 0;
  std::vector<std::size_t> gap_rows(static_cast<std::size_t>(cam.height()), 0);
  parallel_for(0, static_cast<std::size_t>(cam.height()), [&](std::size_t yy) {
    const int v = static_cast<int>(yy);
    std::vector<double> angle(plan.patches.size());
    for (int u = 0; u < cam.width(); ++u) {
      if (!cam.in_domain(u, v)) continue;
      const Point3 ray = cam.project_to_3d(u, v).normalized();
      int owner = -1;
      for (std::size_t k = 0; k < plan.patches.size(); ++k) {
        angle[k] = std::acos(std::clamp(ray.dot(plan.patches[k].center_ray.normalized()), -1.0, 1.0));
        if (!views[k].valid.at(u, v)) continue;
        if (owner < 0 || angle[k] < angle[owner]) owner = static_cast<int>(k);
      }
      if (owner < 0) {
        ++gap_rows[yy];
        continue;
      }
      out.valid.at(u, v) = 1;
      std::vector<std::pair<std::size_t, double>> weights{{static_cast<std::size_t>(owner), 0.5}};
      for (std::size_t k = 0; k < plan.patches.size(); ++k) {
        if (static_cast<int>(k) == owner || !views[k].valid.at(u, v)) continue;
        const double band = plan.patches[k].overlap;
        if (!(band > 0.0)) continue;
        const double gap_px = 0.5 * plan.patches[k].projection.focal * (angle[k] - angle[owner]);
        const double wgt = std::clamp(0.5 - gap_px / band, 0.0, 1.0);
        if (wgt > 0.0) weights.emplace_back(k, wgt);
      }
      for (int c = 0; c < classes; ++c) {
        if (weights.size() == 1) {
          out.scores.at(0, c, v, u) = views[owner].image.at(0, c, v, u);
          continue;
        }
        double num = 0.0, den = 0.0;
        for (auto [k, wgt] : weights) {
          num += wgt * views[k].image.at(0, c, v, u);
          den += wgt;
        }
        out.scores.at(0, c, v, u) = static_cast<float>(num / den);
      }
    }
  });
  for (auto g : gap_rows) gaps += g;
  if (gaps > 0) {
    fail(ErrorCode::CoverageGap,
         std::to_string(gaps) + " valid camera pixels are not covered by any patch");
  }
  return out;
}

// --- Box back-projection ---------------------------------------------------------------

struct BackprojectedBox {
  BoxDet box;
  bool clamped = false;
};

// The box is read as displacements in a rectified frame centred on the box
// centre: one box pixel is one tap spacing of a 3x3 tangent patch there. Its
// four corners are lifted onto that tangent plane, projected into the camera
// and wrapped in their axis-aligned hull.
inline BackprojectedBox backproject_box(const Camera& cam, const BoxDet& box,
                                        ClampPolicy policy = ClampPolicy::Clamp) {
  if (!box.valid()) fail(ErrorCode::InvalidArgument, "box must have u_min < u_max and v_min < v_max");
  const double uc = box.center_u(), vc = box.center_v();
  if (!cam.in_domain(uc, vc)) fail(ErrorCode::OutOfDomain, "box centre outside the camera field of view");
  const TangentPatch patch = build_tangent_patch(cam, uc, vc, 3, 1);
  const double step = patch.s / 2.0;
  BackprojectedBox out;
  out.box = box;
  out.box.u_min = out.box.v_min = std::numeric_limits<double>::infinity();
  out.box.u_max = out.box.v_max = -std::numeric_limits<double>::infinity();
  for (double du : {box.u_min - uc, box.u_max - uc}) {
    for (double dv : {box.v_min - vc, box.v_max - vc}) {
      const Point3 p = patch.center + (du * step) * patch.e1 + (dv * step) * patch.e2;
      bool clamped = false;
      Pixel px;
      if (auto hit = cam.try_project_to_2d(p)) {
        px = *hit;
      } else {
        if (policy == ClampPolicy::Throw) fail(ErrorCode::OutOfDomain, "box corner leaves the field of view");
        px = cam.project_to_2d_clamped(p, clamped);
        out.clamped = true;
      }
      out.box.u_min = std::min(out.box.u_min, px.x());
      out.box.u_max = std::max(out.box.u_max, px.x());
      out.box.v_min = std::min(out.box.v_min, px.y());
      out.box.v_max = std::max(out.box.v_max, px.y());
    }
  }
  return out;
}

}  // namespace rectconv

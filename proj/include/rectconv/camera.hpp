#pragma once

// Calibrated, invertible camera models. A pixel (u, v) maps to a point on the
// model's reference surface (unit sphere for fisheye and cylindrical models,
// the plane z = 1 for the pinhole model) and back.
//
// Pixel centres sit at integer coordinates; the image rectangle spans
// [-0.5, width - 0.5] x [-0.5, height - 0.5]. +u points right, +v points down,
// +z is the optical axis.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rectconv/binary_io.hpp"
#include "rectconv/error.hpp"

namespace rectconv {

using Point3 = Eigen::Vector3d;
using Pixel = Eigen::Vector2d;

enum class CameraModel { FisheyePoly4, Pinhole, Cylindrical };

struct CameraIntrinsics {
  CameraModel model = CameraModel::Pinhole;
  int width = 0;
  int height = 0;
  double cx = 0.0;
  double cy = 0.0;
  // r(theta) = a1 theta + a2 theta^2 + a3 theta^3 + a4 theta^4, in pixels.
  std::array<double, 4> poly{0.0, 0.0, 0.0, 0.0};
  double focal = 0.0;
  // Vertical over horizontal pixel scale.
  double aspect = 1.0;
};

enum class ViolationKind {
  InvalidDimensions,
  PrincipalPointOutOfBounds,
  NonPositiveFocal,
  NonPositiveAspect,
  NonFiniteParameter,
  MonotonicityViolation,
};

struct Violation {
  ViolationKind kind;
  std::string message;
};

namespace detail {

inline double radial_poly(const std::array<double, 4>& a, double theta) {
  return theta * (a[0] + theta * (a[1] + theta * (a[2] + theta * a[3])));
}

inline double radial_poly_derivative(const std::array<double, 4>& a,
                                     double theta) {
  return a[0] + theta * (2.0 * a[1] + theta * (3.0 * a[2] + theta * 4.0 * a[3]));
}

// Largest scaled radius of the four image-rectangle corners.
inline double corner_radius(const CameraIntrinsics& in) {
  double best = 0.0;
  for (double u : {-0.5, in.width - 0.5}) {
    for (double v : {-0.5, in.height - 0.5}) {
      best = std::max(best, std::hypot(u - in.cx, (v - in.cy) / in.aspect));
    }
  }
  return best;
}

// theta of the farthest corner: the first crossing of r(theta) = corner radius
// on [0, pi], or pi when the polynomial never gets there.
inline double fisheye_theta_max(const CameraIntrinsics& in) {
  const double target = corner_radius(in);
  constexpr int kScan = 4096;
  constexpr double kPi = std::numbers::pi;
  double prev = 0.0;
  for (int i = 1; i <= kScan; ++i) {
    const double theta = kPi * i / kScan;
    if (radial_poly(in.poly, theta) >= target) {
      double lo = prev, hi = theta;
      for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
        const double mid = 0.5 * (lo + hi);
        (radial_poly(in.poly, mid) >= target ? hi : lo) = mid;
      }
      return hi;
    }
    prev = theta;
  }
  return kPi;
}

}  // namespace detail

// Checks every intrinsics invariant; an empty result means the parameters are
// usable. Monotonicity of the fisheye polynomial is sampled at 1024 points on
// [0, theta_max].
inline std::vector<Violation> validate(const CameraIntrinsics& in) {
  std::vector<Violation> out;
  auto finite = [](double x) { return std::isfinite(x); };
  bool all_finite = finite(in.cx) && finite(in.cy) && finite(in.focal) &&
                    finite(in.aspect);
  for (double a : in.poly) all_finite = all_finite && finite(a);
  if (!all_finite) {
    out.push_back({ViolationKind::NonFiniteParameter,
                   "camera parameters must be finite"});
    return out;
  }
  if (in.width <= 0 || in.height <= 0) {
    out.push_back({ViolationKind::InvalidDimensions,
                   "width and height must be positive"});
  }
  if (!(in.cx >= 0.0 && in.cx < in.width && in.cy >= 0.0 &&
        in.cy < in.height)) {
    out.push_back({ViolationKind::PrincipalPointOutOfBounds,
                   "principal point must satisfy 0 <= cx < width, "
                   "0 <= cy < height"});
  }
  if (!(in.aspect > 0.0)) {
    out.push_back({ViolationKind::NonPositiveAspect, "aspect must be > 0"});
    return out;
  }
  if (in.model == CameraModel::FisheyePoly4) {
    const double theta_max = detail::fisheye_theta_max(in);
    constexpr int kSamples = 1024;
    for (int i = 0; i <= kSamples; ++i) {
      const double theta = theta_max * i / kSamples;
      const double d = detail::radial_poly_derivative(in.poly, theta);
      if (!(d > 0.0)) {
        std::ostringstream msg;
        msg << "r'(theta) = " << d << " <= 0 at theta = " << theta
            << " (theta_max = " << theta_max << ")";
        out.push_back({ViolationKind::MonotonicityViolation, msg.str()});
        break;
      }
    }
  } else if (!(in.focal > 0.0)) {
    out.push_back({ViolationKind::NonPositiveFocal, "focal must be > 0"});
  }
  return out;
}

inline std::string_view to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::InvalidDimensions: return "InvalidDimensions";
    case ViolationKind::PrincipalPointOutOfBounds:
      return "PrincipalPointOutOfBounds";
    case ViolationKind::NonPositiveFocal: return "NonPositiveFocal";
    case ViolationKind::NonPositiveAspect: return "NonPositiveAspect";
    case ViolationKind::NonFiniteParameter: return "NonFiniteParameter";
    case ViolationKind::MonotonicityViolation: return "MonotonicityViolation";
  }
  return "Unknown";
}

// A validated camera. Immutable; every member function is pure and safe to
// call concurrently.
class Camera {
 public:
  static constexpr int kMaxInversionIterations = 50;
  static constexpr double kInversionTolerance = 1e-9;

  explicit Camera(const CameraIntrinsics& intrinsics) : in_(intrinsics) {
    const auto violations = validate(in_);
    if (!violations.empty()) {
      std::string msg = "invalid camera:";
      for (const auto& v : violations) {
        msg += " [";
        msg += to_string(v.kind);
        msg += "] ";
        msg += v.message;
        msg += ";";
      }
      fail(ErrorCode::InvalidArgument, msg);
    }
    if (in_.model == CameraModel::FisheyePoly4) {
      theta_max_ = detail::fisheye_theta_max(in_);
      r_max_ = detail::radial_poly(in_.poly, theta_max_);
    }
  }

  const CameraIntrinsics& intrinsics() const { return in_; }
  CameraModel model() const { return in_.model; }
  int width() const { return in_.width; }
  int height() const { return in_.height; }
  double theta_max() const { return theta_max_; }
  // Largest invertible radius, in pixels (fisheye only).
  double r_max() const { return r_max_; }
  bool on_sphere() const { return in_.model != CameraModel::Pinhole; }

  double radius(double theta) const { return detail::radial_poly(in_.poly, theta); }

  // Inverts r(theta) = r on [0, theta_max]: Newton from r / a1, bisecting
  // whenever a step leaves the current bracket.
  double invert_radial_poly(double r) const {
    if (!(r >= 0.0) || r > r_max_ + kInversionTolerance) {
      std::ostringstream msg;
      msg << "radius " << r << " px outside invertible range [0, " << r_max_
          << "]";
      fail(ErrorCode::OutOfDomain, msg.str());
    }
    if (r == 0.0) return 0.0;
    double lo = 0.0, hi = theta_max_;
    double theta = in_.poly[0] > 0.0 ? r / in_.poly[0] : 0.5 * hi;
    if (!(theta > lo && theta < hi)) theta = 0.5 * (lo + hi);
    for (int it = 0; it < kMaxInversionIterations; ++it) {
      const double f = detail::radial_poly(in_.poly, theta) - r;
      if (std::abs(f) < kInversionTolerance) return theta;
      if (f < 0.0) lo = theta; else hi = theta;
      const double d = detail::radial_poly_derivative(in_.poly, theta);
      double next = d > 0.0 ? theta - f / d : lo - 1.0;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      theta = next;
    }
    const double f = detail::radial_poly(in_.poly, theta) - r;
    if (std::abs(f) < kInversionTolerance) return theta;
    fail(ErrorCode::NonConvergence,
         "radial polynomial inversion did not converge for r = " +
             std::to_string(r));
  }

  // True when project_to_3d(u, v) is defined.
  bool in_domain(double u, double v) const {
    if (!std::isfinite(u) || !std::isfinite(v)) return false;
    switch (in_.model) {
      case CameraModel::FisheyePoly4:
        return std::hypot(u - in_.cx, (v - in_.cy) / in_.aspect) <= r_max_;
      case CameraModel::Cylindrical:
        return std::abs((u - in_.cx) / in_.focal) <= std::numbers::pi;
      case CameraModel::Pinhole:
        return true;
    }
    return false;
  }

  // Nearest pixel inside the invertible domain (identity for in-domain input).
  Pixel clamp_to_domain(double u, double v) const {
    if (in_domain(u, v)) return {u, v};
    if (in_.model == CameraModel::FisheyePoly4) {
      const double du = u - in_.cx;
      const double dv = (v - in_.cy) / in_.aspect;
      const double r = std::hypot(du, dv);
      const double k = r_max_ / r;
      return {in_.cx + du * k, in_.cy + in_.aspect * dv * k};
    }
    const double limit = std::numbers::pi * in_.focal;
    return {in_.cx + std::clamp(u - in_.cx, -limit, limit), v};
  }

  Point3 project_to_3d(double u, double v) const {
    if (!std::isfinite(u) || !std::isfinite(v)) {
      fail(ErrorCode::OutOfDomain, "non-finite pixel coordinate");
    }
    switch (in_.model) {
      case CameraModel::Pinhole:
        return {(u - in_.cx) / in_.focal,
                (v - in_.cy) / (in_.focal * in_.aspect), 1.0};
      case CameraModel::Cylindrical: {
        const double phi = (u - in_.cx) / in_.focal;
        if (std::abs(phi) > std::numbers::pi) {
          fail(ErrorCode::OutOfDomain, "azimuth beyond +-pi");
        }
        const double h = (v - in_.cy) / (in_.focal * in_.aspect);
        return Point3(std::sin(phi), h, std::cos(phi)).normalized();
      }
      case CameraModel::FisheyePoly4: {
        const double du = u - in_.cx;
        const double dv = (v - in_.cy) / in_.aspect;
        const double r = std::hypot(du, dv);
        if (r == 0.0) return {0.0, 0.0, 1.0};
        const double theta = invert_radial_poly(r);
        const double s = std::sin(theta) / r;
        return {s * du, s * dv, std::cos(theta)};
      }
    }
    fail(ErrorCode::InvalidArgument, "unknown camera model");
  }

  Pixel project_to_2d(const Point3& p) const {
    if (auto px = try_project_to_2d(p)) return *px;
    fail(ErrorCode::BehindCamera, "ray outside the camera field of view");
  }

  // As project_to_2d, but rays outside the field of view yield nullopt.
  std::optional<Pixel> try_project_to_2d(const Point3& p) const {
    if (!p.allFinite() || p.squaredNorm() == 0.0) return std::nullopt;
    switch (in_.model) {
      case CameraModel::Pinhole: {
        if (!(p.z() > 0.0)) return std::nullopt;
        return Pixel(in_.cx + in_.focal * p.x() / p.z(),
                     in_.cy + in_.focal * in_.aspect * p.y() / p.z());
      }
      case CameraModel::Cylindrical: {
        const double rho = std::hypot(p.x(), p.z());
        if (rho == 0.0) return std::nullopt;
        const double phi = std::atan2(p.x(), p.z());
        return Pixel(in_.cx + in_.focal * phi,
                     in_.cy + in_.focal * in_.aspect * p.y() / rho);
      }
      case CameraModel::FisheyePoly4: {
        const double rho = std::hypot(p.x(), p.y());
        const double theta = std::atan2(rho, p.z());
        if (theta > theta_max_ + 1e-12) return std::nullopt;
        if (rho == 0.0) return Pixel(in_.cx, in_.cy);
        const double r = detail::radial_poly(in_.poly, theta);
        return Pixel(in_.cx + r * p.x() / rho,
                     in_.cy + in_.aspect * r * p.y() / rho);
      }
    }
    return std::nullopt;
  }

  // Projects p, pulling rays outside the field of view back onto its edge.
  // clamped is set when that happened.
  Pixel project_to_2d_clamped(const Point3& p, bool& clamped) const {
    clamped = false;
    if (auto px = try_project_to_2d(p)) return *px;
    clamped = true;
    switch (in_.model) {
      case CameraModel::FisheyePoly4: {
        const double rho = std::hypot(p.x(), p.y());
        if (rho == 0.0) return {in_.cx, in_.cy + in_.aspect * r_max_};
        return {in_.cx + r_max_ * p.x() / rho,
                in_.cy + in_.aspect * r_max_ * p.y() / rho};
      }
      case CameraModel::Pinhole: {
        // Behind the image plane: push onto a far point in the same
        // image-plane direction.
        const double z = std::max(std::abs(p.z()), 1e-6);
        return {in_.cx + in_.focal * p.x() / z,
                in_.cy + in_.focal * in_.aspect * p.y() / z};
      }
      case CameraModel::Cylindrical:
        return {in_.cx, in_.cy};
    }
    return {in_.cx, in_.cy};
  }

  // Outward normal of the reference surface at p.
  Point3 surface_normal(const Point3& p) const {
    if (in_.model == CameraModel::Pinhole) return {0.0, 0.0, 1.0};
    return p.normalized();
  }

 private:
  CameraIntrinsics in_;
  double theta_max_ = std::numbers::pi;
  double r_max_ = 0.0;
};

// --- JSON configuration ------------------------------------------------------

inline std::string_view to_string(CameraModel m) {
  switch (m) {
    case CameraModel::FisheyePoly4: return "fisheye_poly4";
    case CameraModel::Pinhole: return "pinhole";
    case CameraModel::Cylindrical: return "cylindrical";
  }
  return "unknown";
}

inline CameraIntrinsics camera_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::Parse, "camera config must be an object");
  static const std::array<std::string_view, 8> kKeys{
      "model", "width", "height", "cx", "cy", "poly", "focal", "aspect"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      fail(ErrorCode::Parse, "unknown camera key '" + key + "'");
    }
  }
  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) fail(ErrorCode::Parse, std::string("missing key '") + key + "'");
    return j.at(key);
  };
  CameraIntrinsics in;
  try {
    const std::string model = require("model").get<std::string>();
    if (model == "fisheye_poly4") {
      in.model = CameraModel::FisheyePoly4;
    } else if (model == "pinhole") {
      in.model = CameraModel::Pinhole;
    } else if (model == "cylindrical") {
      in.model = CameraModel::Cylindrical;
    } else {
      fail(ErrorCode::Parse, "unknown camera model '" + model + "'");
    }
    in.width = require("width").get<int>();
    in.height = require("height").get<int>();
    in.cx = require("cx").get<double>();
    in.cy = require("cy").get<double>();
    in.aspect = j.value("aspect", 1.0);
    if (in.model == CameraModel::FisheyePoly4) {
      const auto poly = require("poly").get<std::vector<double>>();
      if (poly.size() != 4) fail(ErrorCode::Parse, "poly must have 4 coefficients");
      std::copy(poly.begin(), poly.end(), in.poly.begin());
      if (j.contains("focal")) fail(ErrorCode::Parse, "focal is not a fisheye_poly4 key");
    } else {
      in.focal = require("focal").get<double>();
      if (j.contains("poly")) fail(ErrorCode::Parse, "poly is only valid for fisheye_poly4");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, e.what());
  }
  return in;
}

inline nlohmann::json camera_to_json(const CameraIntrinsics& in) {
  nlohmann::json j;
  j["model"] = std::string(to_string(in.model));
  j["width"] = in.width;
  j["height"] = in.height;
  j["cx"] = in.cx;
  j["cy"] = in.cy;
  if (in.model == CameraModel::FisheyePoly4) {
    j["poly"] = std::vector<double>(in.poly.begin(), in.poly.end());
  } else {
    j["focal"] = in.focal;
  }
  j["aspect"] = in.aspect;
  return j;
}

inline CameraIntrinsics load_camera_intrinsics(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot open camera file '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, "'" + path + "': " + e.what());
  }
  return camera_from_json(j);
}

inline void save_camera(const std::string& path, const CameraIntrinsics& in) {
  write_text_atomic(path, camera_to_json(in).dump(2) + "\n");
}

inline Camera load_camera(const std::string& path) {
  return Camera(load_camera_intrinsics(path));
}

}  // namespace rectconv

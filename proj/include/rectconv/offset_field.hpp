#pragma once

// Per-pixel kernel offset fields. For a kernel centred at a pixel, the kernel
// taps are lifted onto the camera's reference surface, a square planar grid of
// the same extent is laid on the tangent plane at the kernel centre, and each
// grid point is projected back to the image. The displacement between the
// projected grid point and the regular tap position is the tap's offset.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rectconv/binary_io.hpp"
#include "rectconv/camera.hpp"
#include "rectconv/error.hpp"
#include "rectconv/parallel.hpp"

namespace rectconv {

// Maps feature-map coordinates to input pixels: u_in = u / scale + offset_u.
// scale is the cumulative downscale factor of the feature map (1 = input).
struct FeatureFrame {
  double scale = 1.0;
  double offset_u = 0.0;
  double offset_v = 0.0;

  Pixel to_input(double u, double v) const {
    return {u / scale + offset_u, v / scale + offset_v};
  }
};

enum class ClampPolicy {
  // Out-of-domain taps are pulled onto the nearest valid pixel and counted.
  Clamp,
  // Out-of-domain taps raise OutOfDomain.
  Throw,
};

struct TangentPatch {
  Point3 center;
  Point3 e1;
  Point3 e2;
  double s = 0.0;
  double w_grid = 0.0;
  double h_grid = 0.0;
};

// Offsets of one kernel, (tap_row, tap_col, component) with component 0 = du
// and 1 = dv.
struct KernelOffsets {
  int kernel_k = 1;
  std::vector<double> data;
  int clamped = 0;

  double du(int row, int col) const { return data[2 * (row * kernel_k + col)]; }
  double dv(int row, int col) const { return data[2 * (row * kernel_k + col) + 1]; }
};

namespace detail {

struct TapGrid {
  int kernel_k;
  double center_u, center_v;  // input pixels
  double step;                // input pixels between adjacent taps

  double u(int col) const { return center_u + (col - 0.5 * (kernel_k - 1)) * step; }
  double v(int row) const { return center_v + (row - 0.5 * (kernel_k - 1)) * step; }
};

inline Point3 lift(const Camera& cam, double u, double v, ClampPolicy policy,
                   int& clamped) {
  if (!cam.in_domain(u, v)) {
    if (policy == ClampPolicy::Throw) {
      fail(ErrorCode::OutOfDomain, "kernel footprint leaves the camera domain at (" +
                                       std::to_string(u) + ", " + std::to_string(v) + ")");
    }
    ++clamped;
    const Pixel c = cam.clamp_to_domain(u, v);
    return cam.project_to_3d(c.x(), c.y());
  }
  return cam.project_to_3d(u, v);
}

// d p / d(pixel axis) at (u, v) by central differences with h = 0.5 px,
// falling back to a one-sided difference at the domain edge.
inline Point3 surface_derivative(const Camera& cam, double u, double v, bool along_u) {
  constexpr double h = 0.5;
  const double du = along_u ? h : 0.0;
  const double dv = along_u ? 0.0 : h;
  const bool fwd = cam.in_domain(u + du, v + dv);
  const bool bwd = cam.in_domain(u - du, v - dv);
  const Point3 p0 = cam.project_to_3d(u, v);
  const Point3 pf = fwd ? cam.project_to_3d(u + du, v + dv) : p0;
  const Point3 pb = bwd ? cam.project_to_3d(u - du, v - dv) : p0;
  const double span = (fwd ? h : 0.0) + (bwd ? h : 0.0);
  if (span == 0.0) fail(ErrorCode::OutOfDomain, "no room for a surface derivative");
  return (pf - pb) / span;
}

inline TangentPatch tangent_patch_for(const Camera& cam, const TapGrid& grid,
                                      ClampPolicy policy, int& clamped,
                                      std::vector<Point3>* taps_out) {
  if (grid.kernel_k < 2) {
    fail(ErrorCode::InvalidArgument, "a tangent patch needs kernel_k >= 2");
  }
  double cu = grid.center_u, cv = grid.center_v;
  if (!cam.in_domain(cu, cv)) {
    if (policy == ClampPolicy::Throw) {
      fail(ErrorCode::OutOfDomain, "kernel centre outside the camera domain");
    }
    ++clamped;
    const Pixel c = cam.clamp_to_domain(cu, cv);
    cu = c.x();
    cv = c.y();
  }

  TangentPatch patch;
  patch.center = cam.project_to_3d(cu, cv);
  const Point3 n = cam.surface_normal(patch.center);

  // Orthonormal frame closest to the (tangent-projected) image axes, placed
  // symmetrically between them. It equals the image axes wherever they are
  // orthogonal and rotates with the image about a radially symmetric centre.
  auto tangent_dir = [&](const Point3& d) {
    const Point3 t = d - d.dot(n) * n;
    const double len = t.norm();
    if (!(len > 0.0)) fail(ErrorCode::OutOfDomain, "degenerate surface derivative");
    return Point3(t / len);
  };
  const Point3 a = tangent_dir(surface_derivative(cam, cu, cv, true));
  const Point3 b = tangent_dir(surface_derivative(cam, cu, cv, false));
  const Point3 m = (a + b).normalized();
  const Point3 d = (a - b).normalized();
  patch.e1 = (m + d) / std::sqrt(2.0);
  patch.e2 = (m - d) / std::sqrt(2.0);

  const int k = grid.kernel_k;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  if (taps_out) taps_out->clear();
  for (int row = 0; row < k; ++row) {
    for (int col = 0; col < k; ++col) {
      const Point3 p = lift(cam, grid.u(col), grid.v(row), policy, clamped);
      if (taps_out) taps_out->push_back(p);
      const double x = p.dot(patch.e1);
      const double y = p.dot(patch.e2);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  patch.w_grid = xmax - xmin;
  patch.h_grid = ymax - ymin;
  patch.s = (patch.w_grid + patch.h_grid) / 2;
  if (!(patch.w_grid > 0.0 && patch.h_grid > 0.0)) {
    fail(ErrorCode::OutOfDomain, "degenerate kernel footprint");
  }
  return patch;
}

// Offsets in feature pixels for the kernel whose taps are `grid` (input px).
inline void offsets_for_grid(const Camera& cam, const TapGrid& grid, double scale,
                             ClampPolicy policy, double* out, int& clamped) {
  const int k = grid.kernel_k;
  if (k == 1) {
    out[0] = out[1] = 0.0;
    return;
  }
  const TangentPatch patch = tangent_patch_for(cam, grid, policy, clamped, nullptr);
  const double spacing = patch.s / (k - 1);
  const double half = 0.5 * (k - 1);
  for (int row = 0; row < k; ++row) {
    for (int col = 0; col < k; ++col) {
      const Point3 p = patch.center + ((col - half) * spacing) * patch.e1 +
                       ((row - half) * spacing) * patch.e2;
      bool tap_clamped = false;
      Pixel px;
      if (policy == ClampPolicy::Throw) {
        auto projected = cam.try_project_to_2d(p);
        if (!projected) {
          fail(ErrorCode::OutOfDomain, "rectified tap leaves the field of view");
        }
        px = *projected;
      } else {
        px = cam.project_to_2d_clamped(p, tap_clamped);
        if (tap_clamped) ++clamped;
      }
      double* o = out + 2 * (row * k + col);
      o[0] = (px.x() - grid.u(col)) * scale;
      o[1] = (px.y() - grid.v(row)) * scale;
    }
  }
}

inline void check_kernel(int kernel_k, int dilation) {
  if (kernel_k < 1 || kernel_k % 2 == 0) {
    fail(ErrorCode::InvalidArgument, "kernel_k must be odd and positive");
  }
  if (dilation < 1) fail(ErrorCode::InvalidArgument, "dilation must be >= 1");
}

}  // namespace detail

// Tangent patch of the kernel centred at feature coordinate (u, v). Taps are
// dilation feature pixels apart, i.e. dilation / scale input pixels.
inline TangentPatch build_tangent_patch(const Camera& cam, double u, double v,
                                        int kernel_k, int dilation,
                                        const FeatureFrame& frame = {}) {
  detail::check_kernel(kernel_k, dilation);
  const Pixel c = frame.to_input(u, v);
  int clamped = 0;
  return detail::tangent_patch_for(
      cam, {kernel_k, c.x(), c.y(), dilation / frame.scale}, ClampPolicy::Throw,
      clamped, nullptr);
}

inline TangentPatch build_tangent_patch(const Camera& cam, double u, double v,
                                        int kernel_k, int dilation, double scale) {
  return build_tangent_patch(cam, u, v, kernel_k, dilation, FeatureFrame{scale});
}

// Offsets (in feature pixels) for the kernel centred at feature coordinate
// (u, v).
inline KernelOffsets kernel_offsets_at(const Camera& cam, double u, double v,
                                       int kernel_k, int dilation,
                                       const FeatureFrame& frame = {},
                                       ClampPolicy policy = ClampPolicy::Clamp) {
  detail::check_kernel(kernel_k, dilation);
  KernelOffsets out;
  out.kernel_k = kernel_k;
  out.data.assign(2 * kernel_k * kernel_k, 0.0);
  const Pixel c = frame.to_input(u, v);
  detail::offsets_for_grid(cam, {kernel_k, c.x(), c.y(), dilation / frame.scale},
                           frame.scale, policy, out.data.data(), out.clamped);
  return out;
}

inline KernelOffsets kernel_offsets_at(const Camera& cam, double u, double v,
                                       int kernel_k, int dilation, double scale,
                                       ClampPolicy policy = ClampPolicy::Clamp) {
  return kernel_offsets_at(cam, u, v, kernel_k, dilation, FeatureFrame{scale},
                           policy);
}

// Offsets stored on a regular lattice over the output positions of one layer.
// Lattice points sit every grid_stride positions with the last row and column
// always present.
class OffsetField {
 public:
  OffsetField() = default;
  OffsetField(int kernel_k, int dilation, int grid_stride, double scale,
              int out_height, int out_width)
      : kernel_k_(kernel_k),
        dilation_(dilation),
        grid_stride_(grid_stride),
        scale_(scale),
        out_height_(out_height),
        out_width_(out_width) {
    if (kernel_k < 1 || dilation < 1 || grid_stride < 1 || out_height < 1 ||
        out_width < 1 || !(scale > 0.0)) {
      fail(ErrorCode::InvalidArgument, "invalid offset field geometry");
    }
    data_.assign(static_cast<std::size_t>(lattice_height()) * lattice_width() *
                     taps() * 2,
                 0.0f);
  }

  static int lattice_extent(int n, int stride) {
    return n <= 1 ? 1 : (n - 1 + stride - 1) / stride + 1;
  }

  int kernel_k() const { return kernel_k_; }
  int dilation() const { return dilation_; }
  int grid_stride() const { return grid_stride_; }
  double scale() const { return scale_; }
  int out_height() const { return out_height_; }
  int out_width() const { return out_width_; }
  int taps() const { return kernel_k_ * kernel_k_; }
  int lattice_height() const { return lattice_extent(out_height_, grid_stride_); }
  int lattice_width() const { return lattice_extent(out_width_, grid_stride_); }
  int lattice_row_position(int i) const { return std::min(i * grid_stride_, out_height_ - 1); }
  int lattice_col_position(int j) const { return std::min(j * grid_stride_, out_width_ - 1); }

  std::size_t block_size() const { return static_cast<std::size_t>(taps()) * 2; }
  std::span<float> block(int i, int j) {
    return {data_.data() + (static_cast<std::size_t>(i) * lattice_width() + j) * block_size(),
            block_size()};
  }
  std::span<const float> block(int i, int j) const {
    return {data_.data() + (static_cast<std::size_t>(i) * lattice_width() + j) * block_size(),
            block_size()};
  }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  // Taps that had to be clamped into the camera domain while building.
  std::size_t clamped_taps = 0;

  bool all_zero() const {
    return std::all_of(data_.begin(), data_.end(), [](float x) { return x == 0.0f; });
  }

  friend bool operator==(const OffsetField& a, const OffsetField& b) {
    return a.kernel_k_ == b.kernel_k_ && a.dilation_ == b.dilation_ &&
           a.grid_stride_ == b.grid_stride_ && a.scale_ == b.scale_ &&
           a.out_height_ == b.out_height_ && a.out_width_ == b.out_width_ &&
           a.data_ == b.data_;
  }

 private:
  int kernel_k_ = 1;
  int dilation_ = 1;
  int grid_stride_ = 1;
  double scale_ = 1.0;
  int out_height_ = 0;
  int out_width_ = 0;
  std::vector<float> data_;
};

namespace detail {

// Fills a field whose output position (x, y) has its kernel centred at feature
// coordinate center(x, y).
template <typename CenterFn>
OffsetField build_field(const Camera& cam, int kernel_k, int dilation,
                        const FeatureFrame& frame, int grid_stride, int out_height,
                        int out_width, CenterFn center, ClampPolicy policy) {
  check_kernel(kernel_k, dilation);
  OffsetField field(kernel_k, dilation, grid_stride, frame.scale, out_height, out_width);
  const int lh = field.lattice_height();
  const int lw = field.lattice_width();
  std::vector<std::size_t> clamped(static_cast<std::size_t>(lh), 0);
  parallel_for(0, static_cast<std::size_t>(lh), [&](std::size_t i) {
    std::vector<double> tmp(field.block_size());
    for (int j = 0; j < lw; ++j) {
      const Eigen::Vector2d c =
          center(field.lattice_col_position(j), field.lattice_row_position(static_cast<int>(i)));
      const Pixel in = frame.to_input(c.x(), c.y());
      int n = 0;
      offsets_for_grid(cam, {kernel_k, in.x(), in.y(), dilation / frame.scale},
                       frame.scale, policy, tmp.data(), n);
      clamped[i] += static_cast<std::size_t>(n);
      auto dst = field.block(static_cast<int>(i), j);
      for (std::size_t t = 0; t < tmp.size(); ++t) dst[t] = static_cast<float>(tmp[t]);
    }
  });
  for (auto n : clamped) field.clamped_taps += n;
  return field;
}

}  // namespace detail

// Field whose output position (x, y) is a kernel centred at feature coordinate
// (x, y) of a map at `scale`.
inline OffsetField compute_offset_field(const Camera& cam, int kernel_k, int dilation,
                                        const FeatureFrame& frame, int grid_stride,
                                        int out_height, int out_width,
                                        ClampPolicy policy = ClampPolicy::Clamp) {
  return detail::build_field(
      cam, kernel_k, dilation, frame, grid_stride, out_height, out_width,
      [](int x, int y) { return Eigen::Vector2d(x, y); }, policy);
}

inline OffsetField compute_offset_field(const Camera& cam, int kernel_k, int dilation,
                                        double scale, int grid_stride, int out_height,
                                        int out_width,
                                        ClampPolicy policy = ClampPolicy::Clamp) {
  return compute_offset_field(cam, kernel_k, dilation, FeatureFrame{scale}, grid_stride,
                              out_height, out_width, policy);
}

// Bilinear interpolation of the stored lattice at output position (u, v), per
// tap and component. out must hold kernel_k^2 * 2 values.
inline void interpolate_offsets(const OffsetField& field, double u, double v,
                                std::span<float> out) {
  if (!(u >= 0.0 && v >= 0.0 && u <= field.out_width() - 1 &&
        v <= field.out_height() - 1)) {
    fail(ErrorCode::OutOfBounds, "offset query (" + std::to_string(u) + ", " +
                                     std::to_string(v) + ") outside the field");
  }
  if (out.size() != field.block_size()) {
    fail(ErrorCode::ShapeMismatch, "offset buffer has the wrong size");
  }
  const int gs = field.grid_stride();
  auto locate = [gs](double q, int lattice, auto position, int& i0, int& i1, double& t) {
    if (lattice == 1) {
      i0 = i1 = 0;
      t = 0.0;
      return;
    }
    i0 = std::min(static_cast<int>(q / gs), lattice - 2);
    i1 = i0 + 1;
    const int q0 = position(i0);
    const int q1 = position(i1);
    t = (q - q0) / (q1 - q0);
  };
  int j0, j1, i0, i1;
  double tx, ty;
  locate(u, field.lattice_width(), [&](int j) { return field.lattice_col_position(j); },
         j0, j1, tx);
  locate(v, field.lattice_height(), [&](int i) { return field.lattice_row_position(i); },
         i0, i1, ty);
  const auto b00 = field.block(i0, j0);
  const auto b01 = field.block(i0, j1);
  const auto b10 = field.block(i1, j0);
  const auto b11 = field.block(i1, j1);
  const double w00 = (1.0 - ty) * (1.0 - tx);
  const double w01 = (1.0 - ty) * tx;
  const double w10 = ty * (1.0 - tx);
  const double w11 = ty * tx;
  for (std::size_t t = 0; t < out.size(); ++t) {
    out[t] = static_cast<float>(w00 * b00[t] + w01 * b01[t] + w10 * b10[t] +
                                w11 * b11[t]);
  }
}

inline std::vector<float> interpolate_offsets(const OffsetField& field, double u, double v) {
  std::vector<float> out(field.block_size());
  interpolate_offsets(field, u, v, out);
  return out;
}

// Geometry of one convolution as seen from its input feature map.
struct LayerGeom {
  int kernel_k = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  FeatureFrame input_frame;
};

inline int conv_output_extent(int in, int kernel_k, int stride, int padding, int dilation) {
  const int span = in + 2 * padding - dilation * (kernel_k - 1) - 1;
  return span < 0 ? 0 : span / stride + 1;
}

// Field for a layer applied to an in_height x in_width feature map. Output
// position (x, y) is served by the kernel centred at input feature coordinate
// (x * stride - padding + dilation * (k - 1) / 2, ...), which realises padding
// as a crop and stride as subsampling. Offsets are in input-feature pixels.
inline OffsetField adapt_for_layer(const Camera& cam, const LayerGeom& geom,
                                   int grid_stride, int in_height, int in_width,
                                   int expected_out_height = -1,
                                   int expected_out_width = -1,
                                   ClampPolicy policy = ClampPolicy::Clamp) {
  if (geom.stride < 1 || geom.padding < 0) {
    fail(ErrorCode::GeometryMismatch, "invalid stride or padding");
  }
  detail::check_kernel(geom.kernel_k, geom.dilation);
  const int oh = conv_output_extent(in_height, geom.kernel_k, geom.stride, geom.padding,
                                    geom.dilation);
  const int ow = conv_output_extent(in_width, geom.kernel_k, geom.stride, geom.padding,
                                    geom.dilation);
  if (oh < 1 || ow < 1) {
    fail(ErrorCode::GeometryMismatch, "layer produces an empty output");
  }
  if ((expected_out_height >= 0 && expected_out_height != oh) ||
      (expected_out_width >= 0 && expected_out_width != ow)) {
    fail(ErrorCode::GeometryMismatch,
         "requested output " + std::to_string(expected_out_height) + "x" +
             std::to_string(expected_out_width) + " but layer yields " +
             std::to_string(oh) + "x" + std::to_string(ow));
  }
  const double shift = geom.dilation * (geom.kernel_k - 1) / 2.0 - geom.padding;
  const int stride = geom.stride;
  return detail::build_field(
      cam, geom.kernel_k, geom.dilation, geom.input_frame, grid_stride, oh, ow,
      [stride, shift](int x, int y) {
        return Eigen::Vector2d(x * stride + shift, y * stride + shift);
      },
      policy);
}

// Grid stride for a field at `scale`, from a stride given in input pixels.
inline int scaled_grid_stride(int input_grid_stride, double scale) {
  return std::max(1, static_cast<int>(std::lround(input_grid_stride * scale)));
}

// --- RCOF container ------------------------------------------------------------

inline constexpr std::uint32_t kRcofVersion = 1;

inline std::vector<std::uint8_t> encode_field(const OffsetField& field) {
  ByteWriter payload;
  payload.f32_array(field.data());
  ByteWriter out;
  out.bytes("RCOF");
  out.u32(kRcofVersion);
  out.u32(static_cast<std::uint32_t>(field.kernel_k()));
  out.u32(static_cast<std::uint32_t>(field.dilation()));
  out.u32(static_cast<std::uint32_t>(field.grid_stride()));
  out.f64(field.scale());
  out.u32(static_cast<std::uint32_t>(field.out_height()));
  out.u32(static_cast<std::uint32_t>(field.out_width()));
  out.u32(crc32_of(payload.buffer()));
  auto& buf = out.buffer();
  buf.insert(buf.end(), payload.buffer().begin(), payload.buffer().end());
  return std::move(buf);
}

inline OffsetField decode_field(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, ErrorCode::FormatVersionMismatch);
  if (in.bytes(4) != "RCOF") fail(ErrorCode::FormatVersionMismatch, "bad RCOF magic");
  const std::uint32_t version = in.u32();
  if (version != kRcofVersion) {
    fail(ErrorCode::FormatVersionMismatch, "unsupported RCOF version " + std::to_string(version));
  }
  const std::uint32_t k = in.u32();
  const std::uint32_t dilation = in.u32();
  const std::uint32_t grid_stride = in.u32();
  const double scale = in.f64();
  const std::uint32_t height = in.u32();
  const std::uint32_t width = in.u32();
  const std::uint32_t crc = in.u32();
  constexpr std::uint32_t kLimit = 1u << 20;
  if (k == 0 || k % 2 == 0 || k > 64 || dilation == 0 || dilation > kLimit ||
      grid_stride == 0 || grid_stride > kLimit || height == 0 || height > kLimit ||
      width == 0 || width > kLimit || !(scale > 0.0) || !std::isfinite(scale)) {
    fail(ErrorCode::FormatVersionMismatch, "malformed RCOF header");
  }
  OffsetField field(static_cast<int>(k), static_cast<int>(dilation),
                    static_cast<int>(grid_stride), scale, static_cast<int>(height),
                    static_cast<int>(width));
  const std::size_t payload_bytes = field.data().size() * 4;
  if (in.remaining() != payload_bytes) {
    fail(ErrorCode::ChecksumMismatch, "RCOF payload has " + std::to_string(in.remaining()) +
                                          " bytes, expected " + std::to_string(payload_bytes));
  }
  const auto payload = bytes.subspan(in.position());
  if (crc32_of(payload) != crc) fail(ErrorCode::ChecksumMismatch, "RCOF payload CRC mismatch");
  ByteReader body(payload, ErrorCode::ChecksumMismatch);
  body.f32_array(field.data());
  for (float x : field.data()) {
    if (!std::isfinite(x)) fail(ErrorCode::ChecksumMismatch, "non-finite offset in RCOF payload");
  }
  return field;
}

inline void save_field(const OffsetField& field, const std::string& path) {
  write_file_atomic(path, encode_field(field));
}

inline OffsetField load_field(const std::string& path) {
  return decode_field(read_file_bytes(path));
}

}  // namespace rectconv

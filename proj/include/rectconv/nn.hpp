#pragma once

// Direct-loop CNN inference kernels. Every output element accumulates in a
// fixed order (bias, then tap-major, channel-minor), so results do not depend
// on the thread count.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rectconv/error.hpp"
#include "rectconv/offset_field.hpp"
#include "rectconv/parallel.hpp"
#include "rectconv/tensor.hpp"

namespace rectconv {

struct ConvParams {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_k = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  Tensor weights;  // out x in x k x k
  std::optional<std::vector<float>> bias;

  void validate() const {
    if (kernel_k < 1 || stride < 1 || dilation < 1 || padding < 0 || in_channels < 1 ||
        out_channels < 1) {
      fail(ErrorCode::ShapeMismatch, "invalid convolution parameters");
    }
    if (weights.shape() != std::array<int, 4>{out_channels, in_channels, kernel_k, kernel_k}) {
      fail(ErrorCode::ShapeMismatch, "weights are " + shape_string(weights) + ", expected " +
                                         std::to_string(out_channels) + "x" +
                                         std::to_string(in_channels) + "x" +
                                         std::to_string(kernel_k) + "x" +
                                         std::to_string(kernel_k));
    }
    if (bias && static_cast<int>(bias->size()) != out_channels) {
      fail(ErrorCode::ShapeMismatch, "bias length does not match out_channels");
    }
  }

  int output_height(int h) const { return conv_output_extent(h, kernel_k, stride, padding, dilation); }
  int output_width(int w) const { return conv_output_extent(w, kernel_k, stride, padding, dilation); }
};

// Bilinear read of a single h x w plane at real coordinates (y, x). Neighbours
// outside the plane read as zero; points at least one pixel outside give 0.
inline float bilinear_sample(std::span<const float> plane, int h, int w, float y, float x) {
  if (y <= -1.0f || y >= static_cast<float>(h) || x <= -1.0f || x >= static_cast<float>(w)) {
    return 0.0f;
  }
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = y0 + 1;
  const int x1 = x0 + 1;
  const float ly = y - static_cast<float>(y0);
  const float lx = x - static_cast<float>(x0);
  const float hy = 1.0f - ly;
  const float hx = 1.0f - lx;
  auto read = [&](int yy, int xx) {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w)
               ? plane[static_cast<std::size_t>(yy) * w + xx]
               : 0.0f;
  };
  return hy * hx * read(y0, x0) + hy * lx * read(y0, x1) + ly * hx * read(y1, x0) +
         ly * lx * read(y1, x1);
}

inline float bilinear_sample(const Tensor& t, int n, int c, float y, float x) {
  return bilinear_sample(t.plane(n, c), t.h(), t.w(), y, x);
}

// Neighbour indices and weights of one bilinear read, reusable across all
// planes of equal size; evaluates to exactly what bilinear_sample returns.
struct BilinearTap {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};
  std::array<float, 4> weight{0.0f, 0.0f, 0.0f, 0.0f};

  BilinearTap() = default;
  BilinearTap(int h, int w, float y, float x) {
    if (y <= -1.0f || y >= static_cast<float>(h) || x <= -1.0f || x >= static_cast<float>(w)) return;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const float ly = y - static_cast<float>(y0);
    const float lx = x - static_cast<float>(x0);
    const float hy = 1.0f - ly;
    const float hx = 1.0f - lx;
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    weight = {hy * hx, hy * lx, ly * hx, ly * lx};
    for (int i = 0; i < 4; ++i) {
      if (ys[i] >= 0 && ys[i] < h && xs[i] >= 0 && xs[i] < w) {
        index[static_cast<std::size_t>(i)] = static_cast<std::ptrdiff_t>(ys[i]) * w + xs[i];
      }
    }
  }

  float operator()(const float* plane) const {
    auto rd = [&](std::size_t i) { return index[i] >= 0 ? plane[index[i]] : 0.0f; };
    return weight[0] * rd(0) + weight[1] * rd(1) + weight[2] * rd(2) + weight[3] * rd(3);
  }
};

namespace detail {

// Shared convolution driver. fill_columns(n, oy, col) writes the receptive
// field of output row oy as col[(tap * C_in + ic) * OW + ox].
template <typename FillColumns>
Tensor convolve_rows(const Tensor& x, const ConvParams& p, int oh, int ow,
                     FillColumns fill_columns) {
  Tensor out(x.n(), p.out_channels, oh, ow);
  const int taps = p.kernel_k * p.kernel_k;
  const int cin = p.in_channels;
  const std::size_t rows = static_cast<std::size_t>(x.n()) * oh;
  parallel_for(0, rows, [&](std::size_t r) {
    const int n = static_cast<int>(r / oh);
    const int oy = static_cast<int>(r % oh);
    std::vector<float> col(static_cast<std::size_t>(taps) * cin * ow);
    fill_columns(n, oy, col);
    for (int oc = 0; oc < p.out_channels; ++oc) {
      float* dst = out.plane(n, oc).data() + static_cast<std::size_t>(oy) * ow;
      const float b = p.bias ? (*p.bias)[oc] : 0.0f;
      std::fill(dst, dst + ow, b);
      const float* wk = p.weights.data().data() + static_cast<std::size_t>(oc) * cin * taps;
      for (int tap = 0; tap < taps; ++tap) {
        for (int ic = 0; ic < cin; ++ic) {
          const float wv = wk[ic * taps + tap];
          const float* src = col.data() + (static_cast<std::size_t>(tap) * cin + ic) * ow;
          for (int ox = 0; ox < ow; ++ox) dst[ox] += wv * src[ox];
        }
      }
    }
  });
  return out;
}

inline void check_conv_input(const Tensor& x, const ConvParams& p) {
  p.validate();
  if (x.c() != p.in_channels) {
    fail(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.c()) +
                                       " channels, layer expects " +
                                       std::to_string(p.in_channels));
  }
}

}  // namespace detail

// Zero-padded cross-correlation.
inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
  detail::check_conv_input(x, p);
  const int oh = p.output_height(x.h());
  const int ow = p.output_width(x.w());
  if (oh < 1 || ow < 1) fail(ErrorCode::ShapeMismatch, "convolution output would be empty");
  const int k = p.kernel_k;
  return detail::convolve_rows(x, p, oh, ow, [&](int n, int oy, std::vector<float>& col) {
    for (int ky = 0; ky < k; ++ky) {
      const int iy = oy * p.stride - p.padding + ky * p.dilation;
      for (int kx = 0; kx < k; ++kx) {
        const int tap = ky * k + kx;
        for (int ic = 0; ic < p.in_channels; ++ic) {
          float* dst = col.data() + (static_cast<std::size_t>(tap) * p.in_channels + ic) * ow;
          if (iy < 0 || iy >= x.h()) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = x.plane(n, ic).data() + static_cast<std::size_t>(iy) * x.w();
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * p.stride - p.padding + kx * p.dilation;
            dst[ox] = (ix >= 0 && ix < x.w()) ? src[ix] : 0.0f;
          }
        }
      }
    }
  });
}

// Convolution whose taps at output (oy, ox) are displaced by the offsets the
// field holds for that output position, read with bilinear_sample.
inline Tensor rectconv2d(const Tensor& x, const ConvParams& p, const OffsetField& field) {
  detail::check_conv_input(x, p);
  const int oh = p.output_height(x.h());
  const int ow = p.output_width(x.w());
  if (oh < 1 || ow < 1) fail(ErrorCode::ShapeMismatch, "convolution output would be empty");
  if (field.kernel_k() != p.kernel_k) {
    fail(ErrorCode::ShapeMismatch, "offset field kernel size does not match the layer");
  }
  if (field.out_height() != oh || field.out_width() != ow) {
    fail(ErrorCode::GeometryMismatch,
         "offset field covers " + std::to_string(field.out_height()) + "x" +
             std::to_string(field.out_width()) + " outputs, layer produces " +
             std::to_string(oh) + "x" + std::to_string(ow));
  }
  const int k = p.kernel_k;
  return detail::convolve_rows(x, p, oh, ow, [&](int n, int oy, std::vector<float>& col) {
    std::vector<float> offsets(field.block_size());
    for (int ox = 0; ox < ow; ++ox) {
      interpolate_offsets(field, ox, oy, offsets);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int tap = ky * k + kx;
          const float sy =
              static_cast<float>(oy * p.stride - p.padding + ky * p.dilation) + offsets[2 * tap + 1];
          const float sx =
              static_cast<float>(ox * p.stride - p.padding + kx * p.dilation) + offsets[2 * tap];
          const BilinearTap read(x.h(), x.w(), sy, sx);
          for (int ic = 0; ic < p.in_channels; ++ic) {
            col[(static_cast<std::size_t>(tap) * p.in_channels + ic) * ow + ox] = read(x.plane(n, ic).data());
          }
        }
      }
    }
  });
}

inline int pool_output_extent(int in, int kernel, int stride, int padding) {
  const int span = in + 2 * padding - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

namespace detail {

template <typename Reduce>
Tensor pool2d(const Tensor& x, int kernel, int stride, int padding, Reduce reduce) {
  if (kernel < 1 || stride < 1 || padding < 0 || 2 * padding > kernel) {
    fail(ErrorCode::ShapeMismatch, "invalid pooling parameters");
  }
  const int oh = pool_output_extent(x.h(), kernel, stride, padding);
  const int ow = pool_output_extent(x.w(), kernel, stride, padding);
  if (oh < 1 || ow < 1) fail(ErrorCode::ShapeMismatch, "pooling output would be empty");
  Tensor out(x.n(), x.c(), oh, ow);
  parallel_for(0, static_cast<std::size_t>(x.n()) * x.c(), [&](std::size_t nc) {
    const int n = static_cast<int>(nc / x.c());
    const int c = static_cast<int>(nc % x.c());
    const auto src = x.plane(n, c);
    auto dst = out.plane(n, c);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        dst[static_cast<std::size_t>(oy) * ow + ox] =
            reduce(src, x.h(), x.w(), oy * stride - padding, ox * stride - padding);
      }
    }
  });
  return out;
}

}  // namespace detail

inline Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding = 0) {
  return detail::pool2d(x, kernel, stride, padding,
                        [kernel](std::span<const float> src, int h, int w, int y0, int x0) {
                          float best = -std::numeric_limits<float>::infinity();
                          for (int y = std::max(y0, 0); y < std::min(y0 + kernel, h); ++y) {
                            for (int xx = std::max(x0, 0); xx < std::min(x0 + kernel, w); ++xx) {
                              best = std::max(best, src[static_cast<std::size_t>(y) * w + xx]);
                            }
                          }
                          return best;
                        });
}

// Padding counts towards the divisor.
inline Tensor avgpool2d(const Tensor& x, int kernel, int stride, int padding = 0) {
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  return detail::pool2d(x, kernel, stride, padding,
                        [kernel, inv](std::span<const float> src, int h, int w, int y0, int x0) {
                          float sum = 0.0f;
                          for (int y = std::max(y0, 0); y < std::min(y0 + kernel, h); ++y) {
                            for (int xx = std::max(x0, 0); xx < std::min(x0 + kernel, w); ++xx) {
                              sum += src[static_cast<std::size_t>(y) * w + xx];
                            }
                          }
                          return sum * inv;
                        });
}

inline Tensor batchnorm_inference(const Tensor& x, std::span<const float> mean,
                                  std::span<const float> var, std::span<const float> gamma,
                                  std::span<const float> beta, float eps) {
  const auto c = static_cast<std::size_t>(x.c());
  if (mean.size() != c || var.size() != c || gamma.size() != c || beta.size() != c) {
    fail(ErrorCode::ShapeMismatch, "batchnorm parameter length does not match channels");
  }
  Tensor out = x;
  for (int n = 0; n < x.n(); ++n) {
    for (int ch = 0; ch < x.c(); ++ch) {
      const double inv_std = 1.0 / std::sqrt(static_cast<double>(var[ch]) + eps);
      for (float& v : out.plane(n, ch)) {
        v = static_cast<float>((v - static_cast<double>(mean[ch])) * inv_std * gamma[ch] +
                               beta[ch]);
      }
    }
  }
  return out;
}

inline Tensor relu(Tensor x) {
  for (float& v : x.data()) v = v > 0.0f ? v : 0.0f;
  return x;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::ShapeMismatch, "add of " + shape_string(a) + " and " + shape_string(b));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

// Bilinear resize with half-pixel centres (align_corners = false). Source
// coordinates are clamped to the map so borders are not darkened.
inline Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1 || x.h() < 1 || x.w() < 1) {
    fail(ErrorCode::ShapeMismatch, "invalid upsample size");
  }
  Tensor out(x.n(), x.c(), out_h, out_w);
  const double sy = static_cast<double>(x.h()) / out_h;
  const double sx = static_cast<double>(x.w()) / out_w;
  std::vector<float> ys(out_h), xs(out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    ys[oy] = static_cast<float>(std::clamp((oy + 0.5) * sy - 0.5, 0.0, x.h() - 1.0));
  }
  for (int ox = 0; ox < out_w; ++ox) {
    xs[ox] = static_cast<float>(std::clamp((ox + 0.5) * sx - 0.5, 0.0, x.w() - 1.0));
  }
  // Sources are always inside the map, so the interpolation can be written
  // in lerp form, which reproduces constant regions exactly.
  parallel_for(0, static_cast<std::size_t>(x.n()) * x.c(), [&](std::size_t nc) {
    const int n = static_cast<int>(nc / x.c());
    const int c = static_cast<int>(nc % x.c());
    const auto src = x.plane(n, c);
    auto dst = out.plane(n, c);
    auto at = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy) * x.w() + xx]; };
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = static_cast<int>(ys[oy]);
      const int y1 = std::min(y0 + 1, x.h() - 1);
      const float ly = ys[oy] - static_cast<float>(y0);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = static_cast<int>(xs[ox]);
        const int x1 = std::min(x0 + 1, x.w() - 1);
        const float lx = xs[ox] - static_cast<float>(x0);
        const float top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * lx;
        const float bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * lx;
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top + (bottom - top) * ly;
      }
    }
  });
  return out;
}

}  // namespace rectconv

#pragma once

// 8-bit image, label-map and mask files: PNG (via libpng) and binary PGM/PPM.
// Images live in memory as 1 x C x H x W tensors with values in [0, 255].

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "rectconv/binary_io.hpp"
#include "rectconv/error.hpp"
#include "rectconv/tensor.hpp"

namespace rectconv {

struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(int w, int h, std::int32_t fill = 0)
      : width(w), height(h), labels(static_cast<std::size_t>(w) * h, fill) {}

  std::int32_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Per-pixel validity, 1 = valid.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> valid;

  Mask() = default;
  Mask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), valid(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return valid[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return valid[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count_valid() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
};

namespace detail {

inline std::string lower_extension(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

// Raw interleaved 8-bit pixels plus geometry.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline RawImage read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    fail(ErrorCode::Io, "cannot read PNG '" + path + "': " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RawImage raw;
  raw.width = static_cast<int>(image.width);
  raw.height = static_cast<int>(image.height);
  raw.channels = color ? 3 : 1;
  raw.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raw.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::Io, "cannot decode PNG '" + path + "': " + image.message);
  }
  return raw;
}

inline void write_png(const std::string& path, const RawImage& raw) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raw.width);
  image.height = static_cast<png_uint_32>(raw.height);
  image.format = raw.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::Io, std::string("cannot encode PNG: ") + image.message);
  }
  std::vector<std::uint8_t> buffer(size);
  if (!png_image_write_to_memory(&image, buffer.data(), &size, 0, raw.pixels.data(), 0,
                                 nullptr)) {
    fail(ErrorCode::Io, std::string("cannot encode PNG: ") + image.message);
  }
  buffer.resize(size);
  write_file_atomic(path, buffer);
}

inline RawImage read_pnm(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") fail(ErrorCode::Parse, "'" + path + "' is not a binary PGM/PPM");
  RawImage raw;
  try {
    raw.width = std::stoi(token());
    raw.height = std::stoi(token());
    if (std::stoi(token()) != 255) fail(ErrorCode::Parse, "only 8-bit PGM/PPM is supported");
  } catch (const std::logic_error&) {
    fail(ErrorCode::Parse, "malformed PGM/PPM header in '" + path + "'");
  }
  ++pos;  // single whitespace after maxval
  raw.channels = magic == "P6" ? 3 : 1;
  const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height * raw.channels;
  if (raw.width <= 0 || raw.height <= 0 || bytes.size() < pos + n) {
    fail(ErrorCode::Parse, "truncated PGM/PPM '" + path + "'");
  }
  raw.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return raw;
}

inline void write_pnm(const std::string& path, const RawImage& raw) {
  std::ostringstream header;
  header << (raw.channels == 3 ? "P6" : "P5") << "\n" << raw.width << " " << raw.height << "\n255\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), raw.pixels.begin(), raw.pixels.end());
  write_file_atomic(path, out);
}

inline RawImage read_raw(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::Io, "no such file '" + path + "'");
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
  fail(ErrorCode::Parse, "unsupported image extension '" + ext + "'");
}

inline void write_raw(const std::string& path, const RawImage& raw) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return write_png(path, raw);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if (ext == ".pgm" && raw.channels != 1) fail(ErrorCode::Parse, "PGM needs a single channel");
    if (ext == ".ppm" && raw.channels != 3) fail(ErrorCode::Parse, "PPM needs three channels");
    return write_pnm(path, raw);
  }
  fail(ErrorCode::Parse, "unsupported image extension '" + ext + "'");
}

}  // namespace detail

inline Tensor read_image(const std::string& path) {
  const auto raw = detail::read_raw(path);
  Tensor t(1, raw.channels, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < raw.channels; ++c) {
        t.at(0, c, y, x) =
            raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c];
      }
    }
  }
  return t;
}

// Writes channel 0 (gray) or channels 0-2 (RGB), rounding and clamping to 8 bit.
inline void write_image(const std::string& path, const Tensor& image) {
  if (image.n() != 1 || (image.c() != 1 && image.c() != 3)) {
    fail(ErrorCode::ShapeMismatch, "images must be 1x1xHxW or 1x3xHxW, got " + shape_string(image));
  }
  detail::RawImage raw{image.w(), image.h(), image.c(), {}};
  raw.pixels.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < raw.channels; ++c) {
        const float v = std::clamp(std::round(image.at(0, c, y, x)), 0.0f, 255.0f);
        raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c] =
            static_cast<std::uint8_t>(v);
      }
    }
  }
  detail::write_raw(path, raw);
}

inline LabelMap read_label_map(const std::string& path) {
  const auto raw = detail::read_raw(path);
  if (raw.channels != 1) fail(ErrorCode::Parse, "label map '" + path + "' must be single channel");
  LabelMap out(raw.width, raw.height);
  std::copy(raw.pixels.begin(), raw.pixels.end(), out.labels.begin());
  return out;
}

inline void write_label_map(const std::string& path, const LabelMap& labels) {
  detail::RawImage raw{labels.width, labels.height, 1, {}};
  raw.pixels.resize(labels.labels.size());
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const auto v = labels.labels[i];
    if (v < 0 || v > 255) fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(v) + " does not fit 8 bits");
    raw.pixels[i] = static_cast<std::uint8_t>(v);
  }
  detail::write_raw(path, raw);
}

// Masks are written as {0, 255}.
inline void write_mask(const std::string& path, const Mask& mask) {
  detail::RawImage raw{mask.width, mask.height, 1, {}};
  raw.pixels.resize(mask.valid.size());
  for (std::size_t i = 0; i < mask.valid.size(); ++i) raw.pixels[i] = mask.valid[i] ? 255 : 0;
  detail::write_raw(path, raw);
}

inline Mask read_mask(const std::string& path) {
  const auto raw = detail::read_raw(path);
  if (raw.channels != 1) fail(ErrorCode::Parse, "mask '" + path + "' must be single channel");
  Mask out(raw.width, raw.height);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) out.valid[i] = raw.pixels[i] >= 128 ? 1 : 0;
  return out;
}

}  // namespace rectconv

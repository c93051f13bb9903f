#pragma once

// Converted-network bundle: a directory holding the network description, its
// weights, one RCOF file per offset field and a manifest with CRC32 hashes of
// every file. Bundles are written into a temporary sibling directory and
// renamed into place, so an interrupted write never leaves a partial bundle.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rectconv/binary_io.hpp"
#include "rectconv/camera.hpp"
#include "rectconv/error.hpp"
#include "rectconv/network.hpp"
#include "rectconv/offset_field.hpp"

namespace rectconv {

struct Bundle {
  NetworkSpec spec;
  WeightStore weights;
  OffsetFieldSet fields;
  CameraIntrinsics camera;
  bool convert_backbone = true;
  bool convert_head = true;
  int grid_stride = 8;
};

inline constexpr int kBundleVersion = 1;

namespace detail {

inline std::string crc_hex(std::span<const std::uint8_t> bytes) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32_of(bytes));
  return buf;
}

inline void write_plain(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
}

}  // namespace detail

inline void save_bundle(const Bundle& bundle, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path target = fs::path(dir).lexically_normal();
  const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path tmp = temp_sibling(target);
  try {
    fs::create_directories(tmp / "fields");
    nlohmann::ordered_json files = nlohmann::ordered_json::object();
    auto put = [&](const std::string& rel, std::span<const std::uint8_t> bytes) {
      detail::write_plain(tmp / rel, bytes);
      files[rel] = detail::crc_hex(bytes);
    };
    const std::string spec_text = network_to_json_string(bundle.spec);
    put("spec.json", std::span(reinterpret_cast<const std::uint8_t*>(spec_text.data()), spec_text.size()));
    put("weights.rcwt", encode_weights(bundle.weights));
    nlohmann::ordered_json field_files = nlohmann::ordered_json::object();
    for (const auto& [key, field] : bundle.fields.fields) {
      const std::string rel = "fields/" + key + ".rcof";
      put(rel, encode_field(*field));
      field_files[key] = rel;
    }

    nlohmann::ordered_json manifest;
    manifest["format"] = "rectconv-bundle";
    manifest["version"] = kBundleVersion;
    manifest["input_height"] = bundle.fields.input_height;
    manifest["input_width"] = bundle.fields.input_width;
    manifest["convert_backbone"] = bundle.convert_backbone;
    manifest["convert_head"] = bundle.convert_head;
    manifest["grid_stride"] = bundle.grid_stride;
    manifest["camera"] = camera_to_json(bundle.camera);
    manifest["fields"] = field_files;
    manifest["files"] = files;
    const std::string text = manifest.dump(2) + "\n";
    detail::write_plain(tmp / "manifest.json",
                        std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

    // Swap into place; an existing bundle is moved aside first and removed
    // only after the new one is visible.
    std::error_code ec;
    fs::path old;
    if (fs::exists(target)) {
      old = temp_sibling(target);
      fs::rename(target, old, ec);
      if (ec) fail(ErrorCode::Io, "cannot replace '" + target.string() + "': " + ec.message());
    }
    fs::rename(tmp, target, ec);
    if (ec) {
      if (!old.empty()) fs::rename(old, target);
      fail(ErrorCode::Io, "cannot move bundle into '" + target.string() + "': " + ec.message());
    }
    if (!old.empty()) fs::remove_all(old, ec);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

// Loads and verifies a bundle: every file listed in the manifest must match
// its hash, and every RectConv node must find its field.
inline Bundle load_bundle(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) fail(ErrorCode::Io, "no bundle directory '" + dir + "'");
  const auto manifest_bytes = read_file_bytes((root / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, "bundle manifest: " + std::string(e.what()));
  }

  Bundle b;
  std::map<std::string, std::vector<std::uint8_t>> contents;
  try {
    if (manifest.value("format", std::string()) != "rectconv-bundle" ||
        manifest.value("version", 0) != kBundleVersion) {
      fail(ErrorCode::FormatVersionMismatch, "unsupported bundle manifest");
    }
    for (const auto& [rel, hash] : manifest.at("files").items()) {
      if (rel.find("..") != std::string::npos) fail(ErrorCode::Parse, "bundle path escapes the bundle: " + rel);
      auto bytes = read_file_bytes((root / rel).string());
      if (detail::crc_hex(bytes) != hash.get<std::string>()) {
        fail(ErrorCode::ChecksumMismatch, "bundle file '" + rel + "' does not match its manifest hash");
      }
      contents[rel] = std::move(bytes);
    }
    b.camera = camera_from_json(manifest.at("camera"));
    b.fields.input_height = manifest.at("input_height").get<int>();
    b.fields.input_width = manifest.at("input_width").get<int>();
    b.convert_backbone = manifest.at("convert_backbone").get<bool>();
    b.convert_head = manifest.at("convert_head").get<bool>();
    b.grid_stride = manifest.at("grid_stride").get<int>();
    auto file = [&](const std::string& rel) -> const std::vector<std::uint8_t>& {
      auto it = contents.find(rel);
      if (it == contents.end()) fail(ErrorCode::Parse, "bundle manifest does not list '" + rel + "'");
      return it->second;
    };
    const auto& spec_bytes = file("spec.json");
    b.spec = parse_network(std::string(spec_bytes.begin(), spec_bytes.end()));
    b.weights = decode_weights(file("weights.rcwt"));
    check_weights(b.spec, b.weights);
    for (const auto& [key, rel] : manifest.at("fields").items()) {
      b.fields.fields[key] = std::make_shared<const OffsetField>(decode_field(file(rel.get<std::string>())));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, "bundle manifest: " + std::string(e.what()));
  }
  for (const auto& n : b.spec.nodes) {
    if (n.kind == NodeKind::RectConv) b.fields.at(n.params.field);
  }
  return b;
}

}  // namespace rectconv

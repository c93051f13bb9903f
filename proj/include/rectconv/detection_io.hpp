#pragma once

// JSON files for point annotations and box detections, keyed by image name.
//
//   {"format": "rectconv-points", "version": 1,
//    "images": [{"name": "a.png", "points": [[u, v], ...]}, ...]}
//
//   {"format": "rectconv-detections", "version": 1,
//    "images": [{"name": "a.png",
//                "boxes": [{"box": [u_min, v_min, u_max, v_max], "score": 0.9, "class": 0}]}]}

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rectconv/binary_io.hpp"
#include "rectconv/box.hpp"
#include "rectconv/error.hpp"
#include "rectconv/metrics.hpp"

namespace rectconv {

using PointSet = std::map<std::string, std::vector<PointGT>>;
using DetectionSet = std::map<std::string, std::vector<BoxDet>>;

namespace detail {

inline nlohmann::json read_tagged_json(const std::string& path, const char* format) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, path + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", std::string()) != format) {
    fail(ErrorCode::Parse, path + ": expected format '" + format + "'");
  }
  if (j.value("version", 0) != 1) fail(ErrorCode::FormatVersionMismatch, path + ": unsupported version");
  return j;
}

}  // namespace detail

inline PointSet read_points(const std::string& path) {
  const auto j = detail::read_tagged_json(path, "rectconv-points");
  PointSet out;
  try {
    for (const auto& img : j.at("images")) {
      auto& pts = out[img.at("name").get<std::string>()];
      for (const auto& p : img.at("points")) {
        pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, path + ": " + e.what());
  }
  return out;
}

inline void write_points(const std::string& path, const PointSet& set) {
  nlohmann::ordered_json j;
  j["format"] = "rectconv-points";
  j["version"] = 1;
  j["images"] = nlohmann::ordered_json::array();
  for (const auto& [name, pts] : set) {
    nlohmann::ordered_json img;
    img["name"] = name;
    img["points"] = nlohmann::ordered_json::array();
    for (const auto& p : pts) img["points"].push_back({p.u, p.v});
    j["images"].push_back(img);
  }
  write_text_atomic(path, j.dump(2) + "\n");
}

inline DetectionSet read_detections(const std::string& path) {
  const auto j = detail::read_tagged_json(path, "rectconv-detections");
  DetectionSet out;
  try {
    for (const auto& img : j.at("images")) {
      auto& boxes = out[img.at("name").get<std::string>()];
      for (const auto& b : img.at("boxes")) {
        const auto& c = b.at("box");
        BoxDet d{c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(), c.at(3).get<double>(),
                 b.value("score", 1.0), b.value("class", 0)};
        if (!d.valid()) fail(ErrorCode::Parse, path + ": degenerate box in '" + img.at("name").get<std::string>() + "'");
        boxes.push_back(d);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, path + ": " + e.what());
  }
  return out;
}

inline void write_detections(const std::string& path, const DetectionSet& set) {
  nlohmann::ordered_json j;
  j["format"] = "rectconv-detections";
  j["version"] = 1;
  j["images"] = nlohmann::ordered_json::array();
  for (const auto& [name, boxes] : set) {
    nlohmann::ordered_json img;
    img["name"] = name;
    img["boxes"] = nlohmann::ordered_json::array();
    for (const auto& b : boxes) {
      nlohmann::ordered_json jb;
      jb["box"] = {b.u_min, b.v_min, b.u_max, b.v_max};
      jb["score"] = b.score;
      jb["class"] = b.class_id;
      img["boxes"].push_back(jb);
    }
    j["images"].push_back(img);
  }
  write_text_atomic(path, j.dump(2) + "\n");
}

}  // namespace rectconv

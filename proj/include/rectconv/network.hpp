#pragma once

// Network descriptions, weight containers, scale tracing, Conv -> RectConv
// conversion and graph execution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rectconv/binary_io.hpp"
#include "rectconv/camera.hpp"
#include "rectconv/error.hpp"
#include "rectconv/nn.hpp"
#include "rectconv/offset_field.hpp"
#include "rectconv/tensor.hpp"

namespace rectconv {

enum class NodeKind {
  Input,
  Conv,
  RectConv,
  MaxPool,
  AvgPool,
  BatchNorm,
  ReLU,
  Add,
  UpsampleBilinear,
  Output,
};

enum class NodeTag { Backbone, Head, Other };

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return "Input";
    case NodeKind::Conv: return "Conv";
    case NodeKind::RectConv: return "RectConv";
    case NodeKind::MaxPool: return "MaxPool";
    case NodeKind::AvgPool: return "AvgPool";
    case NodeKind::BatchNorm: return "BatchNorm";
    case NodeKind::ReLU: return "ReLU";
    case NodeKind::Add: return "Add";
    case NodeKind::UpsampleBilinear: return "UpsampleBilinear";
    case NodeKind::Output: return "Output";
  }
  return "?";
}

inline std::string_view to_string(NodeTag t) {
  switch (t) {
    case NodeTag::Backbone: return "backbone";
    case NodeTag::Head: return "head";
    case NodeTag::Other: return "other";
  }
  return "?";
}

// Union of the per-kind parameters; which fields are meaningful depends on the
// node kind.
struct LayerParams {
  int channels = 0;  // Input (0 = unconstrained), BatchNorm
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  bool bias = true;
  float eps = 1e-5f;
  int factor = 0;      // UpsampleBilinear by integer factor, or
  std::string target;  // UpsampleBilinear to the spatial size of another node
  std::string field;   // RectConv: offset field key

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct Node {
  std::string name;
  NodeKind kind = NodeKind::Input;
  LayerParams params;
  std::vector<std::string> inputs;
  NodeTag tag = NodeTag::Other;

  bool is_conv() const { return kind == NodeKind::Conv || kind == NodeKind::RectConv; }
  friend bool operator==(const Node&, const Node&) = default;
};

struct NetworkSpec {
  static constexpr int kVersion = 1;
  std::vector<Node> nodes;

  const Node& node(const std::string& name) const {
    for (const auto& n : nodes) {
      if (n.name == name) return n;
    }
    fail(ErrorCode::Parse, "no node named '" + name + "'");
  }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// --- Validation and JSON ------------------------------------------------------------

namespace detail {

inline NodeKind parse_kind(const std::string& s) {
  static const std::map<std::string, NodeKind> kKinds{
      {"Input", NodeKind::Input},         {"Conv", NodeKind::Conv},
      {"RectConv", NodeKind::RectConv},   {"MaxPool", NodeKind::MaxPool},
      {"AvgPool", NodeKind::AvgPool},     {"BatchNorm", NodeKind::BatchNorm},
      {"ReLU", NodeKind::ReLU},           {"Add", NodeKind::Add},
      {"UpsampleBilinear", NodeKind::UpsampleBilinear}, {"Output", NodeKind::Output}};
  if (auto it = kKinds.find(s); it != kKinds.end()) return it->second;
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower.find("transpose") != std::string::npos || lower.find("deconv") != std::string::npos) {
    fail(ErrorCode::UnknownKind,
         "layer kind '" + s +
             "' is a deconvolution; only fully convolutional networks without "
             "deconvolution layers are supported");
  }
  if (lower.find("linear") != std::string::npos || lower.find("dense") != std::string::npos ||
      lower.find("fullyconnected") != std::string::npos) {
    fail(ErrorCode::UnknownKind, "layer kind '" + s +
                                     "' fixes the input size; only fully convolutional "
                                     "networks are supported");
  }
  fail(ErrorCode::UnknownKind, "unknown layer kind '" + s + "'");
}

inline NodeTag parse_tag(const std::string& s) {
  if (s == "backbone") return NodeTag::Backbone;
  if (s == "head") return NodeTag::Head;
  if (s == "other") return NodeTag::Other;
  fail(ErrorCode::Parse, "unknown tag '" + s + "'");
}

inline std::vector<std::string> allowed_params(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return {"channels"};
    case NodeKind::Conv:
      return {"in_channels", "out_channels", "kernel", "stride", "padding", "dilation", "bias"};
    case NodeKind::RectConv:
      return {"in_channels", "out_channels", "kernel", "stride", "padding", "dilation", "bias", "field"};
    case NodeKind::MaxPool:
    case NodeKind::AvgPool: return {"kernel", "stride", "padding"};
    case NodeKind::BatchNorm: return {"channels", "eps"};
    case NodeKind::UpsampleBilinear: return {"factor", "target"};
    case NodeKind::ReLU:
    case NodeKind::Add:
    case NodeKind::Output: return {};
  }
  return {};
}

inline LayerParams parse_params(NodeKind kind, const nlohmann::json& j, const std::string& node) {
  LayerParams p;
  if (j.is_null()) return p;
  if (!j.is_object()) fail(ErrorCode::Parse, "params of '" + node + "' must be an object");
  const auto allowed = allowed_params(kind);
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      if (kind == NodeKind::Input && (key == "height" || key == "width")) {
        fail(ErrorCode::Parse, "node '" + node +
                                   "' fixes the input size; networks must accept "
                                   "images of arbitrary size");
      }
      fail(ErrorCode::Parse, "node '" + node + "' (" + std::string(to_string(kind)) +
                                 ") has unknown parameter '" + key + "'");
    }
  }
  p.channels = j.value("channels", 0);
  p.in_channels = j.value("in_channels", 0);
  p.out_channels = j.value("out_channels", 0);
  p.kernel = j.value("kernel", 1);
  p.stride = j.value("stride", kind == NodeKind::MaxPool || kind == NodeKind::AvgPool ? p.kernel : 1);
  p.padding = j.value("padding", 0);
  p.dilation = j.value("dilation", 1);
  p.bias = j.value("bias", true);
  p.eps = j.value("eps", 1e-5f);
  p.factor = j.value("factor", 0);
  p.target = j.value("target", std::string());
  p.field = j.value("field", std::string());
  return p;
}

inline nlohmann::ordered_json params_to_json(const Node& n) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  const auto& p = n.params;
  switch (n.kind) {
    case NodeKind::Input:
      if (p.channels > 0) j["channels"] = p.channels;
      break;
    case NodeKind::Conv:
    case NodeKind::RectConv:
      j["in_channels"] = p.in_channels;
      j["out_channels"] = p.out_channels;
      j["kernel"] = p.kernel;
      j["stride"] = p.stride;
      j["padding"] = p.padding;
      j["dilation"] = p.dilation;
      j["bias"] = p.bias;
      if (n.kind == NodeKind::RectConv && !p.field.empty()) j["field"] = p.field;
      break;
    case NodeKind::MaxPool:
    case NodeKind::AvgPool:
      j["kernel"] = p.kernel;
      j["stride"] = p.stride;
      j["padding"] = p.padding;
      break;
    case NodeKind::BatchNorm:
      j["channels"] = p.channels;
      j["eps"] = p.eps;
      break;
    case NodeKind::UpsampleBilinear:
      if (!p.target.empty()) j["target"] = p.target; else j["factor"] = p.factor;
      break;
    default:
      break;
  }
  return j;
}

}  // namespace detail

// Structural checks: unique names, one Input, inputs defined before use (which
// makes the node list a topological order of a DAG), arities and parameters.
inline void validate_network(const NetworkSpec& spec) {
  std::set<std::string> seen;
  int input_count = 0;
  int output_count = 0;
  for (const auto& n : spec.nodes) {
    const std::string where = "node '" + n.name + "': ";
    if (n.name.empty()) fail(ErrorCode::Parse, "node without a name");
    if (seen.count(n.name)) fail(ErrorCode::Parse, "duplicate node name '" + n.name + "'");
    for (const auto& in : n.inputs) {
      if (!seen.count(in)) {
        fail(ErrorCode::Parse, where + "input '" + in +
                                   "' is not defined earlier (graph must be a DAG in "
                                   "topological order)");
      }
    }
    std::size_t arity = 1;
    if (n.kind == NodeKind::Input) arity = 0;
    if (n.kind == NodeKind::Add) arity = 2;
    if (n.inputs.size() != arity) {
      fail(ErrorCode::Parse, where + "expects " + std::to_string(arity) + " input(s)");
    }
    const auto& p = n.params;
    switch (n.kind) {
      case NodeKind::Input: ++input_count; break;
      case NodeKind::Output: ++output_count; break;
      case NodeKind::Conv:
      case NodeKind::RectConv:
        if (p.in_channels < 1 || p.out_channels < 1 || p.kernel < 1 || p.stride < 1 ||
            p.padding < 0 || p.dilation < 1) {
          fail(ErrorCode::Parse, where + "invalid convolution parameters");
        }
        break;
      case NodeKind::MaxPool:
      case NodeKind::AvgPool:
        if (p.kernel < 1 || p.stride < 1 || p.padding < 0 || 2 * p.padding > p.kernel) {
          fail(ErrorCode::Parse, where + "invalid pooling parameters");
        }
        break;
      case NodeKind::BatchNorm:
        if (p.channels < 1 || !(p.eps >= 0.0f)) fail(ErrorCode::Parse, where + "invalid batchnorm parameters");
        break;
      case NodeKind::UpsampleBilinear:
        if (p.target.empty() == (p.factor < 1)) {
          fail(ErrorCode::Parse, where + "upsample needs exactly one of factor >= 1 or target");
        }
        if (!p.target.empty() && !seen.count(p.target)) {
          fail(ErrorCode::Parse, where + "upsample target '" + p.target + "' is not defined earlier");
        }
        break;
      default:
        break;
    }
    seen.insert(n.name);
  }
  if (input_count != 1) fail(ErrorCode::Parse, "network must have exactly one Input node");
  if (output_count < 1) fail(ErrorCode::Parse, "network must have at least one Output node");
}

inline NetworkSpec network_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    if (!j.is_object()) fail(ErrorCode::Parse, "network file must hold an object");
    for (const auto& [key, value] : j.items()) {
      if (key != "format" && key != "version" && key != "nodes") {
        fail(ErrorCode::Parse, "unknown top-level key '" + key + "'");
      }
    }
    if (j.value("format", std::string()) != "rectconv-network") {
      fail(ErrorCode::Parse, "format must be \"rectconv-network\"");
    }
    if (j.value("version", 0) != NetworkSpec::kVersion) {
      fail(ErrorCode::Parse, "unsupported network version");
    }
    for (const auto& jn : j.at("nodes")) {
      for (const auto& [key, value] : jn.items()) {
        if (key != "name" && key != "kind" && key != "params" && key != "inputs" && key != "tag") {
          fail(ErrorCode::Parse, "unknown node key '" + key + "'");
        }
      }
      Node n;
      n.name = jn.at("name").get<std::string>();
      n.kind = detail::parse_kind(jn.at("kind").get<std::string>());
      n.params = detail::parse_params(n.kind, jn.value("params", nlohmann::json()), n.name);
      n.inputs = jn.value("inputs", std::vector<std::string>{});
      n.tag = detail::parse_tag(jn.value("tag", std::string("other")));
      spec.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, e.what());
  }
  validate_network(spec);
  return spec;
}

inline std::string network_to_json_string(const NetworkSpec& spec) {
  nlohmann::ordered_json j;
  j["format"] = "rectconv-network";
  j["version"] = NetworkSpec::kVersion;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : spec.nodes) {
    nlohmann::ordered_json jn;
    jn["name"] = n.name;
    jn["kind"] = std::string(to_string(n.kind));
    jn["inputs"] = n.inputs;
    jn["tag"] = std::string(to_string(n.tag));
    jn["params"] = detail::params_to_json(n);
    j["nodes"].push_back(std::move(jn));
  }
  return j.dump(2) + "\n";
}

inline NetworkSpec parse_network(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, e.what());
  }
  return network_from_json(j);
}

inline NetworkSpec load_network(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot open network file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_network(ss.str());
  } catch (const Error& e) {
    const std::string msg = e.what();
    fail(e.code(), path + ": " + msg.substr(std::string(to_string(e.code())).size() + 2));
  }
}

inline void save_network(const NetworkSpec& spec, const std::string& path) {
  write_text_atomic(path, network_to_json_string(spec));
}

// --- Weights (RCWT) ---------------------------------------------------------------

struct WeightEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  friend bool operator==(const WeightEntry&, const WeightEntry&) = default;
};

// Named float tensors, kept in file order.
class WeightStore {
 public:
  void set(std::string name, std::vector<std::uint32_t> dims, std::vector<float> data) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (n != data.size()) fail(ErrorCode::ShapeMismatch, "weight '" + name + "' data/dims mismatch");
    if (auto it = index_.find(name); it != index_.end()) {
      entries_[it->second] = {std::move(name), std::move(dims), std::move(data)};
      return;
    }
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(dims), std::move(data)});
  }

  const WeightEntry* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }
  const WeightEntry& get(const std::string& name) const {
    if (const auto* e = find(name)) return *e;
    fail(ErrorCode::MissingWeight, "missing weight '" + name + "'");
  }

  const std::vector<WeightEntry>& entries() const { return entries_; }
  friend bool operator==(const WeightStore& a, const WeightStore& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<WeightEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::uint32_t kRcwtVersion = 1;

inline std::vector<std::uint8_t> encode_weights(const WeightStore& store) {
  ByteWriter out;
  out.bytes("RCWT");
  out.u32(kRcwtVersion);
  out.u32(static_cast<std::uint32_t>(store.entries().size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "weight name too long");
    if (e.dims.size() > 0xFF) fail(ErrorCode::InvalidArgument, "weight rank too large");
    out.u16(static_cast<std::uint16_t>(e.name.size()));
    out.bytes(e.name);
    out.u8(0);  // f32
    out.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) out.u32(d);
    out.f32_array(e.data);
  }
  out.u32(crc32_of(out.buffer()));
  return std::move(out.buffer());
}

inline WeightStore decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RCWT") {
    fail(ErrorCode::FormatVersionMismatch, "bad RCWT magic");
  }
  {
    ByteReader head(bytes.subspan(4, 4), ErrorCode::FormatVersionMismatch);
    if (head.u32() != kRcwtVersion) fail(ErrorCode::FormatVersionMismatch, "unsupported RCWT version");
  }
  if (bytes.size() < 16) fail(ErrorCode::ChecksumMismatch, "RCWT file truncated");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4), ErrorCode::ChecksumMismatch);
  if (crc32_of(body) != tail.u32()) fail(ErrorCode::ChecksumMismatch, "RCWT CRC mismatch");

  ByteReader in(body.subspan(8), ErrorCode::FormatVersionMismatch);
  const std::uint32_t count = in.u32();
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = in.u16();
    std::string name = in.bytes(len);
    if (in.u8() != 0) fail(ErrorCode::FormatVersionMismatch, "unsupported dtype for '" + name + "'");
    const std::uint8_t rank = in.u8();
    std::vector<std::uint32_t> dims(rank);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = in.u32();
      n *= d;
    }
    if (n * 4 > in.remaining()) fail(ErrorCode::FormatVersionMismatch, "weight '" + name + "' overruns file");
    std::vector<float> data(n);
    in.f32_array(data);
    if (store.find(name)) fail(ErrorCode::FormatVersionMismatch, "duplicate weight '" + name + "'");
    store.set(std::move(name), std::move(dims), std::move(data));
  }
  if (in.remaining() != 0) fail(ErrorCode::FormatVersionMismatch, "trailing bytes in RCWT");
  return store;
}

inline void save_weights(const WeightStore& store, const std::string& path) {
  write_file_atomic(path, encode_weights(store));
}

// Every Conv/RectConv/BatchNorm node must resolve with consistent shapes.
inline void check_weights(const NetworkSpec& spec, const WeightStore& store) {
  auto expect = [&](const std::string& name, std::vector<std::uint32_t> dims) {
    const auto& e = store.get(name);
    if (e.dims != dims) {
      std::string want, got;
      for (auto d : dims) want += std::to_string(d) + " ";
      for (auto d : e.dims) got += std::to_string(d) + " ";
      fail(ErrorCode::ShapeMismatch, "weight '" + name + "' has dims [ " + got + "], expected [ " + want + "]");
    }
  };
  for (const auto& n : spec.nodes) {
    const auto& p = n.params;
    if (n.is_conv()) {
      const auto k = static_cast<std::uint32_t>(p.kernel);
      expect(n.name + ".weight", {static_cast<std::uint32_t>(p.out_channels),
                                  static_cast<std::uint32_t>(p.in_channels), k, k});
      if (p.bias) expect(n.name + ".bias", {static_cast<std::uint32_t>(p.out_channels)});
    } else if (n.kind == NodeKind::BatchNorm) {
      for (const char* s : {".mean", ".var", ".gamma", ".beta"}) {
        expect(n.name + s, {static_cast<std::uint32_t>(p.channels)});
      }
    }
  }
}

inline WeightStore load_weights(const std::string& path, const NetworkSpec& spec) {
  WeightStore store = decode_weights(read_file_bytes(path));
  check_weights(spec, store);
  return store;
}

// --- Scale and geometry tracing --------------------------------------------------

struct NodeScale {
  double input_scale = 1.0;   // scale of the map the node consumes
  double output_scale = 1.0;  // scale of the map it produces
};

using ScaleTrace = std::map<std::string, NodeScale>;

inline bool same_scale(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(a, b); }

// Cumulative downscale factors relative to the network input.
inline ScaleTrace scale_trace(const NetworkSpec& spec) {
  ScaleTrace trace;
  for (const auto& n : spec.nodes) {
    NodeScale s;
    if (!n.inputs.empty()) s.input_scale = trace.at(n.inputs[0]).output_scale;
    s.output_scale = s.input_scale;
    switch (n.kind) {
      case NodeKind::Conv:
      case NodeKind::RectConv:
      case NodeKind::MaxPool:
      case NodeKind::AvgPool:
        s.output_scale = s.input_scale / n.params.stride;
        break;
      case NodeKind::UpsampleBilinear:
        s.output_scale = n.params.target.empty() ? s.input_scale * n.params.factor
                                                 : trace.at(n.params.target).output_scale;
        break;
      case NodeKind::Add: {
        const double other = trace.at(n.inputs[1]).output_scale;
        if (!same_scale(s.input_scale, other)) {
          std::ostringstream msg;
          msg << "Add node '" << n.name << "' joins scales " << s.input_scale << " and " << other;
          fail(ErrorCode::ScaleConflict, msg.str());
        }
        break;
      }
      default:
        break;
    }
    trace[n.name] = s;
  }
  return trace;
}

// Spatial geometry of a node's output for a fixed input size.
struct NodeGeometry {
  int channels = 0;
  int height = 0;
  int width = 0;
  FeatureFrame frame;
};

inline std::vector<NodeGeometry> trace_geometry(const NetworkSpec& spec, int in_channels,
                                                int in_height, int in_width) {
  scale_trace(spec);  // reports ScaleConflict
  std::vector<NodeGeometry> geo(spec.nodes.size());
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    const auto& p = n.params;
    NodeGeometry g;
    const NodeGeometry* in = n.inputs.empty() ? nullptr : &geo[spec.index_of(n.inputs[0])];
    const std::string where = "node '" + n.name + "': ";
    switch (n.kind) {
      case NodeKind::Input:
        if (p.channels > 0 && p.channels != in_channels) {
          fail(ErrorCode::ShapeMismatch, where + "expects " + std::to_string(p.channels) +
                                             " channels, image has " + std::to_string(in_channels));
        }
        g = {in_channels, in_height, in_width, FeatureFrame{}};
        break;
      case NodeKind::Conv:
      case NodeKind::RectConv:
      case NodeKind::MaxPool:
      case NodeKind::AvgPool: {
        const bool conv = n.is_conv();
        if (conv && in->channels != p.in_channels) {
          fail(ErrorCode::ShapeMismatch, where + "receives " + std::to_string(in->channels) +
                                             " channels, expects " + std::to_string(p.in_channels));
        }
        const int d = conv ? p.dilation : 1;
        g.channels = conv ? p.out_channels : in->channels;
        g.height = conv ? conv_output_extent(in->height, p.kernel, p.stride, p.padding, d)
                        : pool_output_extent(in->height, p.kernel, p.stride, p.padding);
        g.width = conv ? conv_output_extent(in->width, p.kernel, p.stride, p.padding, d)
                       : pool_output_extent(in->width, p.kernel, p.stride, p.padding);
        if (g.height < 1 || g.width < 1) {
          fail(ErrorCode::GeometryMismatch, where + "input " + std::to_string(in->height) + "x" +
                                                std::to_string(in->width) + " is too small");
        }
        const double shift = d * (p.kernel - 1) / 2.0 - p.padding;
        const double a = 1.0 / in->frame.scale;
        g.frame.scale = in->frame.scale / p.stride;
        g.frame.offset_u = a * shift + in->frame.offset_u;
        g.frame.offset_v = a * shift + in->frame.offset_v;
        break;
      }
      case NodeKind::BatchNorm:
        if (in->channels != p.channels) fail(ErrorCode::ShapeMismatch, where + "channel count mismatch");
        g = *in;
        break;
      case NodeKind::ReLU:
      case NodeKind::Output:
        g = *in;
        break;
      case NodeKind::Add: {
        const auto& other = geo[spec.index_of(n.inputs[1])];
        if (other.channels != in->channels || other.height != in->height || other.width != in->width) {
          fail(ErrorCode::ShapeMismatch, where + "inputs have different shapes");
        }
        g = *in;
        break;
      }
      case NodeKind::UpsampleBilinear: {
        g.channels = in->channels;
        if (p.target.empty()) {
          g.height = in->height * p.factor;
          g.width = in->width * p.factor;
        } else {
          const auto& t = geo[spec.index_of(p.target)];
          g.height = t.height;
          g.width = t.width;
        }
        const double ru = static_cast<double>(in->width) / g.width;
        const double rv = static_cast<double>(in->height) / g.height;
        const double a = 1.0 / in->frame.scale;
        // Source coordinate (x + 0.5) r - 0.5; a single scale (from the u axis)
        // describes the frame.
        g.frame.scale = in->frame.scale / ru;
        g.frame.offset_u = a * (0.5 * ru - 0.5) + in->frame.offset_u;
        g.frame.offset_v = a * (0.5 * rv - 0.5) + in->frame.offset_v;
        break;
      }
    }
    geo[i] = g;
  }
  return geo;
}

// --- Conversion ------------------------------------------------------------------

struct ConvertOptions {
  bool convert_backbone = true;
  bool convert_head = true;
  // Lattice spacing in input pixels; scaled down with the feature map.
  int grid_stride = 8;
  int input_height = 0;
  int input_width = 0;
  int input_channels = 3;
  ClampPolicy clamp = ClampPolicy::Clamp;
};

// Offset fields of a converted network, keyed by geometry. Layers with equal
// (kernel, dilation, stride, padding, input frame, input size) share a field.
struct OffsetFieldSet {
  int input_height = 0;
  int input_width = 0;
  std::map<std::string, std::shared_ptr<const OffsetField>> fields;

  const OffsetField& at(const std::string& key) const {
    auto it = fields.find(key);
    if (it == fields.end()) fail(ErrorCode::GeometryMismatch, "missing offset field '" + key + "'");
    return *it->second;
  }
};

struct ConversionRecord {
  std::string node;
  int kernel_k = 0;
  double scale = 1.0;
  std::string field_key;
  bool shared = false;  // field reused from an earlier layer
  bool newly_converted = false;
};

struct Conversion {
  NetworkSpec spec;
  OffsetFieldSet fields;
  std::vector<ConversionRecord> report;
};

inline bool tag_enabled(NodeTag tag, const ConvertOptions& o) {
  return (tag == NodeTag::Backbone && o.convert_backbone) || (tag == NodeTag::Head && o.convert_head);
}

inline std::string field_key(const LayerParams& p, const NodeGeometry& in) {
  std::ostringstream key;
  key.precision(9);
  key << "k" << p.kernel << "_d" << p.dilation << "_s" << p.stride << "_p" << p.padding << "_in"
      << in.height << "x" << in.width << "_sc" << in.frame.scale << "_o" << in.frame.offset_u << "_"
      << in.frame.offset_v;
  std::string s = key.str();
  for (char& c : s) {
    if (c == '.') c = 'p';
    if (c == '-') c = 'm';
    if (c == '+') c = 'P';
  }
  return s;
}

// Every Conv node with kernel > 1 whose tag is enabled becomes a RectConv;
// existing RectConv nodes are kept and get fields too. Weights are not touched.
inline Conversion convert_to_rectconv(const NetworkSpec& spec, const WeightStore& weights,
                                      const Camera& cam, const ConvertOptions& options) {
  validate_network(spec);
  check_weights(spec, weights);
  if (options.input_height < 1 || options.input_width < 1) {
    fail(ErrorCode::GeometryMismatch, "conversion needs the input image size");
  }
  if (options.grid_stride < 1) fail(ErrorCode::InvalidArgument, "grid_stride must be >= 1");
  const auto geo = trace_geometry(spec, options.input_channels, options.input_height, options.input_width);

  Conversion out;
  out.spec = spec;
  out.fields.input_height = options.input_height;
  out.fields.input_width = options.input_width;
  for (std::size_t i = 0; i < out.spec.nodes.size(); ++i) {
    Node& n = out.spec.nodes[i];
    if (!n.is_conv()) continue;
    const bool convert = n.kind == NodeKind::Conv && n.params.kernel > 1 && tag_enabled(n.tag, options);
    if (!convert && n.kind != NodeKind::RectConv) continue;
    if (n.params.kernel % 2 == 0) {
      fail(ErrorCode::GeometryMismatch, "node '" + n.name + "': even kernels have no centre tap");
    }
    const auto& in = geo[spec.index_of(n.inputs[0])];
    const std::string key = field_key(n.params, in);
    ConversionRecord rec{n.name, n.params.kernel, in.frame.scale, key, false, convert};
    if (out.fields.fields.count(key)) {
      rec.shared = true;
    } else {
      LayerGeom lg{n.params.kernel, n.params.stride, n.params.padding, n.params.dilation, in.frame};
      try {
        auto field = adapt_for_layer(cam, lg, scaled_grid_stride(options.grid_stride, in.frame.scale),
                                     in.height, in.width, geo[i].height, geo[i].width, options.clamp);
        out.fields.fields[key] = std::make_shared<const OffsetField>(std::move(field));
      } catch (const Error& e) {
        fail(e.code(), "node '" + n.name + "': " + e.what());
      }
    }
    n.kind = NodeKind::RectConv;
    n.params.field = key;
    out.report.push_back(rec);
  }
  return out;
}

// --- Execution -------------------------------------------------------------------

// Prepared network: parameters resolved once, reusable across inferences.
// run() is const and may be called concurrently.
class Executor {
 public:
  Executor(NetworkSpec spec, const WeightStore& weights, OffsetFieldSet fields = {})
      : spec_(std::move(spec)), fields_(std::move(fields)) {
    validate_network(spec_);
    check_weights(spec_, weights);
    layers_.resize(spec_.nodes.size());
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
      const auto& n = spec_.nodes[i];
      auto& l = layers_[i];
      if (n.is_conv()) {
        const auto& p = n.params;
        l.conv.in_channels = p.in_channels;
        l.conv.out_channels = p.out_channels;
        l.conv.kernel_k = p.kernel;
        l.conv.stride = p.stride;
        l.conv.padding = p.padding;
        l.conv.dilation = p.dilation;
        l.conv.weights = Tensor(p.out_channels, p.in_channels, p.kernel, p.kernel,
                                weights.get(n.name + ".weight").data);
        if (p.bias) l.conv.bias = weights.get(n.name + ".bias").data;
        if (n.kind == NodeKind::RectConv) {
          if (p.field.empty()) fail(ErrorCode::GeometryMismatch, "RectConv '" + n.name + "' has no field");
          l.field = &fields_.at(p.field);
        }
      } else if (n.kind == NodeKind::BatchNorm) {
        l.mean = weights.get(n.name + ".mean").data;
        l.var = weights.get(n.name + ".var").data;
        l.gamma = weights.get(n.name + ".gamma").data;
        l.beta = weights.get(n.name + ".beta").data;
      }
    }
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
      if (spec_.nodes[i].kind == NodeKind::Output) outputs_.push_back(static_cast<int>(i));
    }
    // Last consumer of every node, so intermediates can be released early.
    last_use_.assign(spec_.nodes.size(), -1);
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
      for (const auto& in : spec_.nodes[i].inputs) last_use_[spec_.index_of(in)] = static_cast<int>(i);
      if (!spec_.nodes[i].params.target.empty()) {
        last_use_[spec_.index_of(spec_.nodes[i].params.target)] = static_cast<int>(i);
      }
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  const OffsetFieldSet& fields() const { return fields_; }

  // Runs the graph and returns the first Output node's tensor. Tensors of the
  // nodes named in `capture` are copied into *captured.
  Tensor run(const Tensor& image, const std::vector<std::string>& capture = {},
             std::map<std::string, Tensor>* captured = nullptr) const {
    if (image.n() < 1) fail(ErrorCode::ShapeMismatch, "empty batch");
    if (!fields_.fields.empty() &&
        (image.h() != fields_.input_height || image.w() != fields_.input_width)) {
      fail(ErrorCode::GeometryMismatch,
           "image is " + std::to_string(image.h()) + "x" + std::to_string(image.w()) +
               " but offset fields were built for " + std::to_string(fields_.input_height) + "x" +
               std::to_string(fields_.input_width));
    }
    std::vector<std::optional<Tensor>> values(spec_.nodes.size());
    std::set<int> keep;
    for (int o : outputs_) keep.insert(o);
    for (const auto& name : capture) {
      const int idx = spec_.index_of(name);
      if (idx < 0) fail(ErrorCode::InvalidArgument, "cannot capture unknown node '" + name + "'");
      keep.insert(idx);
    }
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
      const auto& n = spec_.nodes[i];
      const auto& l = layers_[i];
      auto input = [&](std::size_t k) -> const Tensor& { return *values[spec_.index_of(n.inputs[k])]; };
      Tensor out;
      try {
        switch (n.kind) {
          case NodeKind::Input:
            if (n.params.channels > 0 && image.c() != n.params.channels) {
              fail(ErrorCode::ShapeMismatch, "image channel count does not match the network");
            }
            out = image;
            break;
          case NodeKind::Conv: out = conv2d(input(0), l.conv); break;
          case NodeKind::RectConv: out = rectconv2d(input(0), l.conv, *l.field); break;
          case NodeKind::MaxPool:
            out = maxpool2d(input(0), n.params.kernel, n.params.stride, n.params.padding);
            break;
          case NodeKind::AvgPool:
            out = avgpool2d(input(0), n.params.kernel, n.params.stride, n.params.padding);
            break;
          case NodeKind::BatchNorm:
            out = batchnorm_inference(input(0), l.mean, l.var, l.gamma, l.beta, n.params.eps);
            break;
          case NodeKind::ReLU: out = relu(input(0)); break;
          case NodeKind::Add: out = add(input(0), input(1)); break;
          case NodeKind::UpsampleBilinear: {
            const Tensor& x = input(0);
            if (n.params.target.empty()) {
              out = upsample_bilinear(x, x.h() * n.params.factor, x.w() * n.params.factor);
            } else {
              const Tensor& t = *values[spec_.index_of(n.params.target)];
              out = upsample_bilinear(x, t.h(), t.w());
            }
            break;
          }
          case NodeKind::Output: out = input(0); break;
        }
      } catch (const Error& e) {
        fail(e.code(), "node '" + n.name + "': " + e.what());
      }
      values[i] = std::move(out);
      // Release inputs whose last consumer was this node.
      for (std::size_t j = 0; j <= i; ++j) {
        if (last_use_[j] == static_cast<int>(i) && !keep.count(static_cast<int>(j))) values[j].reset();
      }
    }
    if (captured) {
      for (const auto& name : capture) (*captured)[name] = *values[spec_.index_of(name)];
    }
    return *values[outputs_.front()];
  }

 private:
  struct Layer {
    ConvParams conv;
    const OffsetField* field = nullptr;
    std::vector<float> mean, var, gamma, beta;
  };

  NetworkSpec spec_;
  OffsetFieldSet fields_;
  std::vector<Layer> layers_;
  std::vector<int> outputs_;
  std::vector<int> last_use_;
};

inline Tensor infer(const NetworkSpec& spec, const WeightStore& weights, const OffsetFieldSet& fields,
                    const Tensor& image) {
  return Executor(spec, weights, fields).run(image);
}

}  // namespace rectconv

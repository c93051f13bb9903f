#pragma once

// Small reference networks with seeded random weights, used by the sample
// data generator, the benchmark and the warp-comparison experiment.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rectconv/network.hpp"

namespace rectconv {

namespace detail {

inline Node make_node(std::string name, NodeKind kind, std::vector<std::string> inputs,
                      NodeTag tag = NodeTag::Other) {
  Node n;
  n.name = std::move(name);
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.tag = tag;
  return n;
}

inline Node make_conv(std::string name, std::string input, int cin, int cout, int k, int stride, int pad,
                      int dilation, NodeTag tag) {
  Node n = make_node(std::move(name), NodeKind::Conv, {std::move(input)}, tag);
  n.params.in_channels = cin;
  n.params.out_channels = cout;
  n.params.kernel = k;
  n.params.stride = stride;
  n.params.padding = pad;
  n.params.dilation = dilation;
  return n;
}

}  // namespace detail

// Four unpadded convolutions (K = 7, 5, 5, 3) followed by four 1x1 layers;
// ReLU after every layer but the last.
inline NetworkSpec probe_network(int in_channels = 3, int hidden = 8, int out_channels = 4) {
  using detail::make_conv;
  using detail::make_node;
  NetworkSpec s;
  Node in = make_node("input", NodeKind::Input, {});
  in.params.channels = in_channels;
  s.nodes.push_back(in);
  std::string prev = "input";
  int cin = in_channels;
  const int kernels[] = {7, 5, 5, 3, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) {
    const bool last = i == 7;
    const std::string name = "conv" + std::to_string(i + 1);
    const int cout = last ? out_channels : hidden;
    s.nodes.push_back(make_conv(name, prev, cin, cout, kernels[i], 1, 0, 1, NodeTag::Backbone));
    prev = name;
    cin = cout;
    if (!last) {
      s.nodes.push_back(make_node(name + "_relu", NodeKind::ReLU, {prev}));
      prev = name + "_relu";
    }
  }
  s.nodes.push_back(make_node("output", NodeKind::Output, {prev}));
  return s;
}

// Ten-convolution segmentation network: strided 7x7 stem with batch norm and
// pooling, two residual stages, a dilated head and a 1x1 classifier, with a
// bilinear upsample back to the input size.
inline NetworkSpec segmentation_network(int classes = 5, int width = 16) {
  using detail::make_conv;
  using detail::make_node;
  const NodeTag bb = NodeTag::Backbone, hd = NodeTag::Head;
  const int w2 = 2 * width;
  NetworkSpec s;
  Node in = make_node("input", NodeKind::Input, {});
  in.params.channels = 3;
  s.nodes.push_back(in);
  auto relu = [&](const std::string& name, const std::string& from, NodeTag tag) {
    s.nodes.push_back(make_node(name, NodeKind::ReLU, {from}, tag));
  };

  s.nodes.push_back(make_conv("stem", "input", 3, width, 7, 2, 3, 1, bb));
  Node bn = make_node("stem_bn", NodeKind::BatchNorm, {"stem"}, bb);
  bn.params.channels = width;
  s.nodes.push_back(bn);
  relu("stem_relu", "stem_bn", bb);
  Node pool = make_node("pool", NodeKind::MaxPool, {"stem_relu"}, bb);
  pool.params.kernel = 2;
  pool.params.stride = 2;
  s.nodes.push_back(pool);

  s.nodes.push_back(make_conv("stage1_a", "pool", width, width, 3, 1, 1, 1, bb));
  relu("stage1_a_relu", "stage1_a", bb);
  s.nodes.push_back(make_conv("stage1_b", "stage1_a_relu", width, width, 3, 1, 1, 1, bb));
  s.nodes.push_back(make_node("stage1_add", NodeKind::Add, {"stage1_b", "pool"}, bb));
  relu("stage1_relu", "stage1_add", bb);

  s.nodes.push_back(make_conv("stage2_down", "stage1_relu", width, w2, 3, 2, 1, 1, bb));
  relu("stage2_down_relu", "stage2_down", bb);
  s.nodes.push_back(make_conv("stage2_a", "stage2_down_relu", w2, w2, 3, 1, 1, 1, bb));
  relu("stage2_a_relu", "stage2_a", bb);
  s.nodes.push_back(make_conv("stage2_b", "stage2_a_relu", w2, w2, 3, 1, 1, 1, bb));
  s.nodes.push_back(make_node("stage2_add", NodeKind::Add, {"stage2_b", "stage2_down_relu"}, bb));
  relu("stage2_relu", "stage2_add", bb);

  s.nodes.push_back(make_conv("head_proj", "stage2_relu", w2, w2, 1, 1, 0, 1, hd));
  relu("head_proj_relu", "head_proj", hd);
  s.nodes.push_back(make_conv("head_context", "head_proj_relu", w2, w2, 3, 1, 2, 2, hd));
  relu("head_context_relu", "head_context", hd);
  s.nodes.push_back(make_conv("head_fuse", "head_context_relu", w2, width, 3, 1, 1, 1, hd));
  relu("head_fuse_relu", "head_fuse", hd);
  s.nodes.push_back(make_conv("classifier", "head_fuse_relu", width, classes, 1, 1, 0, 1, hd));
  Node up = make_node("upsample", NodeKind::UpsampleBilinear, {"classifier"}, hd);
  up.params.target = "input";
  s.nodes.push_back(up);
  s.nodes.push_back(make_node("output", NodeKind::Output, {"upsample"}));
  return s;
}

// Uniform He-style initialisation for every parametrised node; batch-norm
// statistics are drawn near identity. Deterministic for a given seed.
inline WeightStore random_weights(const NetworkSpec& spec, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
  WeightStore store;
  for (const auto& n : spec.nodes) {
    const auto& p = n.params;
    if (n.is_conv()) {
      const auto k = static_cast<std::uint32_t>(p.kernel);
      const float s = std::sqrt(6.0f / static_cast<float>(p.in_channels * p.kernel * p.kernel));
      std::vector<float> w(static_cast<std::size_t>(p.out_channels) * p.in_channels * k * k);
      for (auto& v : w) v = s * unit(rng);
      store.set(n.name + ".weight",
                {static_cast<std::uint32_t>(p.out_channels), static_cast<std::uint32_t>(p.in_channels), k, k},
                std::move(w));
      if (p.bias) {
        std::vector<float> b(static_cast<std::size_t>(p.out_channels));
        for (auto& v : b) v = 0.1f * unit(rng);
        store.set(n.name + ".bias", {static_cast<std::uint32_t>(p.out_channels)}, std::move(b));
      }
    } else if (n.kind == NodeKind::BatchNorm) {
      const auto c = static_cast<std::size_t>(p.channels);
      std::vector<float> mean(c), var(c), gamma(c), beta(c);
      for (std::size_t i = 0; i < c; ++i) {
        mean[i] = 0.1f * unit(rng);
        var[i] = 1.0f + 0.5f * unit(rng);
        gamma[i] = 1.0f + 0.2f * unit(rng);
        beta[i] = 0.1f * unit(rng);
      }
      const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(c)};
      store.set(n.name + ".mean", dims, mean);
      store.set(n.name + ".var", dims, var);
      store.set(n.name + ".gamma", dims, gamma);
      store.set(n.name + ".beta", dims, beta);
    }
  }
  return store;
}

}  // namespace rectconv

#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "sortnet/error.hpp"
#include "sortnet/fusion.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/tensor.hpp"

namespace sortnet {

enum class LayerKind {
  Conv,
  Pool,
  Fc,
  Relu,
  BatchNorm,
  BranchBlock,
  ResidualBlock,
  Flatten,
  GlobalAvgPool,
};

/// One declarative layer. Block kinds nest further layer lists:
/// a branch block holds two branches, a residual block holds the residual
/// body F(x) and an optional projection shortcut (empty means identity).
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t k = 0;
  std::size_t channels_in = 0;
  std::size_t channels_out = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = true;
  FusionSpec fusion;
  std::vector<std::vector<LayerSpec>> branches;
  std::vector<LayerSpec> body;
  std::vector<LayerSpec> shortcut;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1, std::size_t pad = 0,
                        bool bias = true) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.channels_in = in;
    l.channels_out = out;
    l.k = k;
    l.stride = stride;
    l.pad = pad;
    l.bias = bias;
    return l;
  }
  static LayerSpec pool(std::size_t k, std::size_t stride) {
    LayerSpec l;
    l.kind = LayerKind::Pool;
    l.k = k;
    l.stride = stride;
    return l;
  }
  static LayerSpec fc(std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::Fc;
    l.channels_in = in;
    l.channels_out = out;
    return l;
  }
  static LayerSpec batchnorm(std::size_t channels) {
    LayerSpec l;
    l.kind = LayerKind::BatchNorm;
    l.channels_in = l.channels_out = channels;
    return l;
  }
  static LayerSpec simple(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
  }

  bool is_block() const { return kind == LayerKind::BranchBlock || kind == LayerKind::ResidualBlock; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::string name;
  Shape input_shape;  // per sample, e.g. {3,32,32} or {2}
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Pool: return "pool";
    case LayerKind::Fc: return "fc";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::BranchBlock: return "branch_block";
    case LayerKind::ResidualBlock: return "residual_block";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
  }
  return "unknown";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::Conv, LayerKind::Pool, LayerKind::Fc, LayerKind::Relu, LayerKind::BatchNorm,
                 LayerKind::BranchBlock, LayerKind::ResidualBlock, LayerKind::Flatten, LayerKind::GlobalAvgPool}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorKind::InvalidConfig, "unknown layer kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Shape inference
// ---------------------------------------------------------------------------

namespace detail {

inline std::string layer_where(const LayerSpec& l) { return std::string(to_string(l.kind)); }

inline Shape infer_layer(const LayerSpec& l, const Shape& in);

inline Shape infer_sequence(const std::vector<LayerSpec>& layers, Shape shape) {
  for (const auto& l : layers) shape = infer_layer(l, shape);
  return shape;
}

inline Shape infer_layer(const LayerSpec& l, const Shape& in) {
  auto need_rank = [&](std::size_t r) {
    if (in.size() != r) {
      throw Error(ErrorKind::ShapeMismatch, layer_where(l) + " expects rank-" + std::to_string(r) + " input, got " +
                                                shape_str(in));
    }
  };
  switch (l.kind) {
    case LayerKind::Conv: {
      need_rank(3);
      if (in[0] != l.channels_in) {
        throw Error(ErrorKind::ShapeMismatch, "conv expects " + std::to_string(l.channels_in) + " channels, got " +
                                                  shape_str(in));
      }
      const auto h = conv_out_size(in[1], l.k, l.stride, l.pad);
      const auto w = conv_out_size(in[2], l.k, l.stride, l.pad);
      if (l.k == 0 || h == 0 || w == 0) {
        throw Error(ErrorKind::InvalidGeometry, "conv k=" + std::to_string(l.k) + " does not fit " + shape_str(in));
      }
      return {l.channels_out, h, w};
    }
    case LayerKind::Pool: {
      need_rank(3);
      const auto h = conv_out_size(in[1], l.k, l.stride, 0);
      const auto w = conv_out_size(in[2], l.k, l.stride, 0);
      if (l.k == 0 || h == 0 || w == 0) {
        throw Error(ErrorKind::InvalidGeometry, "pool k=" + std::to_string(l.k) + " does not fit " + shape_str(in));
      }
      return {in[0], h, w};
    }
    case LayerKind::Fc:
      need_rank(1);
      if (in[0] != l.channels_in) {
        throw Error(ErrorKind::ShapeMismatch, "fc expects " + std::to_string(l.channels_in) + " inputs, got " +
                                                  shape_str(in));
      }
      return {l.channels_out};
    case LayerKind::Relu:
      return in;
    case LayerKind::BatchNorm:
      if (in.empty() || in[0] != l.channels_in) {
        throw Error(ErrorKind::ShapeMismatch, "batchnorm over " + std::to_string(l.channels_in) +
                                                  " channels got " + shape_str(in));
      }
      return in;
    case LayerKind::Flatten:
      return {shape_size(in)};
    case LayerKind::GlobalAvgPool:
      need_rank(3);
      return {in[0]};
    case LayerKind::BranchBlock: {
      if (l.branches.size() != 2) throw Error(ErrorKind::InvalidConfig, "branch_block needs exactly two branches");
      l.fusion.validate();
      const Shape a = infer_sequence(l.branches[0], in);
      const Shape b = infer_sequence(l.branches[1], in);
      if (a != b) {
        throw Error(ErrorKind::ShapeMismatch, "branch outputs differ: " + shape_str(a) + " vs " + shape_str(b));
      }
      return a;
    }
    case LayerKind::ResidualBlock: {
      l.fusion.validate();
      const Shape body = infer_sequence(l.body, in);
      const Shape skip = infer_sequence(l.shortcut, in);
      if (body != skip) {
        throw Error(ErrorKind::ShapeMismatch, "residual body " + shape_str(body) + " vs shortcut " + shape_str(skip));
      }
      return body;
    }
  }
  throw Error(ErrorKind::InvalidConfig, "unhandled layer kind");
}

}  // namespace detail

/// Per-sample output shape after each top-level layer. Throws when adjacent
/// layers do not chain.
inline std::vector<Shape> infer_shapes(const NetworkSpec& net) {
  std::vector<Shape> shapes;
  Shape s = net.input_shape;
  for (const auto& l : net.layers) {
    s = detail::infer_layer(l, s);
    shapes.push_back(s);
  }
  return shapes;
}

/// Full validation: shapes chain and the network ends in num_classes logits.
inline void validate(const NetworkSpec& net) {
  const auto shapes = infer_shapes(net);
  const Shape last = shapes.empty() ? net.input_shape : shapes.back();
  if (last != Shape{net.num_classes}) {
    throw Error(ErrorKind::ShapeMismatch, net.name + " ends in " + shape_str(last) + ", expected [" +
                                              std::to_string(net.num_classes) + "]");
  }
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

inline std::size_t count_params(const std::vector<LayerSpec>& layers) {
  std::size_t total = 0;
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        total += l.channels_out * l.channels_in * l.k * l.k + (l.bias ? l.channels_out : 0);
        break;
      case LayerKind::Fc:
        total += l.channels_out * l.channels_in + l.channels_out;
        break;
      case LayerKind::BatchNorm:
        total += 2 * l.channels_in;
        break;
      case LayerKind::BranchBlock:
        for (const auto& b : l.branches) total += count_params(b);
        break;
      case LayerKind::ResidualBlock:
        total += count_params(l.body) + count_params(l.shortcut);
        break;
      default:
        break;
    }
  }
  return total;
}

inline std::size_t count_params(const NetworkSpec& net) { return count_params(net.layers); }

// ---------------------------------------------------------------------------
// Receptive field
// ---------------------------------------------------------------------------

struct RfEntry {
  std::size_t index;  // top-level layer index
  std::string kind;
  std::size_t rf;    // receptive field side length; 0 once the field is global
  std::size_t jump;  // input-pixel distance between adjacent outputs
  Shape out_shape;
};

namespace detail {

struct RfState {
  std::size_t rf = 1;
  std::size_t jump = 1;
  bool global = false;
};

inline RfState rf_through(const std::vector<LayerSpec>& layers, RfState s);

inline RfState rf_layer(const LayerSpec& l, RfState s) {
  if (s.global) return s;
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::Pool:
      s.rf += (l.k - 1) * s.jump;
      s.jump *= l.stride;
      return s;
    case LayerKind::Fc:
    case LayerKind::Flatten:
    case LayerKind::GlobalAvgPool:
      s.global = true;
      return s;
    case LayerKind::BranchBlock: {
      RfState out = s;
      out.rf = 0;
      for (const auto& b : l.branches) {
        const RfState r = rf_through(b, s);
        out.rf = std::max(out.rf, r.rf);
        out.jump = r.jump;
        out.global = out.global || r.global;
      }
      return out;
    }
    case LayerKind::ResidualBlock: {
      const RfState a = rf_through(l.body, s);
      const RfState b = rf_through(l.shortcut, s);
      return {std::max(a.rf, b.rf), a.jump, a.global || b.global};
    }
    default:
      return s;
  }
}

inline RfState rf_through(const std::vector<LayerSpec>& layers, RfState s) {
  for (const auto& l : layers) s = rf_layer(l, s);
  return s;
}

}  // namespace detail

/// rf' = rf + (k-1)*jump, jump' = jump*stride, layer by layer. Blocks report
/// the widest path through them.
inline std::vector<RfEntry> receptive_field(const NetworkSpec& net) {
  const auto shapes = infer_shapes(net);
  std::vector<RfEntry> table;
  detail::RfState s;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    s = detail::rf_layer(net.layers[i], s);
    table.push_back({i, std::string(to_string(net.layers[i].kind)), s.global ? 0 : s.rf, s.jump, shapes[i]});
  }
  return table;
}

// ---------------------------------------------------------------------------
// Chain -> two-branch transform
// ---------------------------------------------------------------------------

/// floor((k+1)/2): two cascaded convs of this size see the same k x k field.
inline std::size_t shrink_kernel(std::size_t k) {
  if (k == 0 || k % 2 == 0) throw Error(ErrorKind::EvenKernel, "kernel size " + std::to_string(k) + " is not odd");
  return (k + 1) / 2;
}

/// Replaces one conv (+ReLU) by two symmetric branches
/// F_m(x) = relu(conv'_m(relu(conv_m(x)))) with shrunk kernels, fused by
/// `fusion`. The original padding is split over the two convs and the
/// stride moves to the second conv, so the output shape and receptive field
/// match the original layer.
inline LayerSpec branch_transform(const LayerSpec& conv, const FusionSpec& fusion = FusionSpec::sort_branched(),
                                  bool with_batchnorm = false) {
  if (conv.kind != LayerKind::Conv) {
    throw Error(ErrorKind::InvalidConfig, "branch_transform needs a conv layer, got " +
                                              std::string(to_string(conv.kind)));
  }
  const std::size_t k2 = shrink_kernel(conv.k);
  if (conv.k < 3) throw Error(ErrorKind::InvalidGeometry, "branch_transform needs k >= 3");
  const std::size_t pad_first = (conv.pad + 1) / 2;
  const std::size_t pad_second = conv.pad / 2;

  std::vector<LayerSpec> branch;
  branch.push_back(LayerSpec::conv(conv.channels_in, conv.channels_out, k2, 1, pad_first, conv.bias));
  if (with_batchnorm) branch.push_back(LayerSpec::batchnorm(conv.channels_out));
  branch.push_back(LayerSpec::simple(LayerKind::Relu));
  branch.push_back(LayerSpec::conv(conv.channels_out, conv.channels_out, k2, conv.stride, pad_second, conv.bias));
  if (with_batchnorm) branch.push_back(LayerSpec::batchnorm(conv.channels_out));
  branch.push_back(LayerSpec::simple(LayerKind::Relu));

  LayerSpec block;
  block.kind = LayerKind::BranchBlock;
  block.k = conv.k;
  block.channels_in = conv.channels_in;
  block.channels_out = conv.channels_out;
  block.stride = conv.stride;
  block.pad = conv.pad;
  block.fusion = fusion;
  block.branches = {branch, branch};
  return block;
}

/// Sets the fusion of every block, recursively.
inline void set_fusion(std::vector<LayerSpec>& layers, const FusionSpec& fusion) {
  for (auto& l : layers) {
    if (l.is_block()) l.fusion = fusion;
    for (auto& b : l.branches) set_fusion(b, fusion);
    set_fusion(l.body, fusion);
    set_fusion(l.shortcut, fusion);
  }
}

inline bool has_residual_blocks(const std::vector<LayerSpec>& layers) {
  return std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) {
    return l.kind == LayerKind::ResidualBlock ||
           std::any_of(l.branches.begin(), l.branches.end(), [](const auto& b) { return has_residual_blocks(b); });
  });
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

/// LeNet for 3x32x32 input: three 5x5 pad-2 convs (32, 32, 64 channels),
/// each followed by ReLU and 3x3 stride-2 max pooling, then fc-64, ReLU,
/// fc-classes. `star` branches every conv; `sort` adds the product term to
/// the branch fusion.
inline NetworkSpec build_lenet(bool star, bool sort, std::size_t num_classes = 10) {
  NetworkSpec net;
  net.name = std::string(star ? "lenet_star" : "lenet") + (star && sort ? "_sort" : "");
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;
  const FusionSpec fusion = sort ? FusionSpec::sort_branched() : FusionSpec::linear();
  const std::size_t widths[] = {32, 32, 64};
  std::size_t in = 3;
  for (std::size_t w : widths) {
    const LayerSpec conv = LayerSpec::conv(in, w, 5, 1, 2);
    if (star) {
      net.layers.push_back(branch_transform(conv, fusion));
    } else {
      net.layers.push_back(conv);
      net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
    }
    net.layers.push_back(LayerSpec::pool(3, 2));
    in = w;
  }
  net.layers.push_back(LayerSpec::simple(LayerKind::Flatten));
  net.layers.push_back(LayerSpec::fc(64 * 3 * 3, 64));
  net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
  net.layers.push_back(LayerSpec::fc(64, num_classes));
  return net;
}

/// CIFAR-style ResNet with 3 stages of n basic blocks (16, 32, 64 channels
/// times `width`); depth 6n+2. `sort` swaps the x+F(x) merge for the
/// residual SORT merge.
inline NetworkSpec build_resnet(std::size_t n_blocks_per_stage, std::size_t width, bool sort,
                                std::size_t num_classes = 10) {
  if (n_blocks_per_stage < 1) throw Error(ErrorKind::InvalidConfig, "resnet needs at least one block per stage");
  if (width < 1) throw Error(ErrorKind::InvalidConfig, "resnet width must be >= 1");
  NetworkSpec net;
  const std::size_t depth = 6 * n_blocks_per_stage + 2;
  net.name = (width > 1 ? "wrn" : "resnet") + std::to_string(depth) + (width > 1 ? "x" + std::to_string(width) : "") +
             (sort ? "_sort" : "");
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;
  const FusionSpec fusion = sort ? FusionSpec::residual_sort() : FusionSpec::linear();

  net.layers.push_back(LayerSpec::conv(3, 16, 3, 1, 1, false));
  net.layers.push_back(LayerSpec::batchnorm(16));
  net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
  std::size_t in = 16;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t c = (16u << stage) * width;
    for (std::size_t b = 0; b < n_blocks_per_stage; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      LayerSpec block;
      block.kind = LayerKind::ResidualBlock;
      block.channels_in = in;
      block.channels_out = c;
      block.stride = stride;
      block.k = 3;
      block.fusion = fusion;
      block.body = {LayerSpec::conv(in, c, 3, stride, 1, false), LayerSpec::batchnorm(c),
                    LayerSpec::simple(LayerKind::Relu), LayerSpec::conv(c, c, 3, 1, 1, false),
                    LayerSpec::batchnorm(c)};
      if (stride != 1 || in != c) block.shortcut = {LayerSpec::conv(in, c, 1, stride, 0, false), LayerSpec::batchnorm(c)};
      net.layers.push_back(std::move(block));
      in = c;
    }
  }
  net.layers.push_back(LayerSpec::simple(LayerKind::GlobalAvgPool));
  net.layers.push_back(LayerSpec::fc(in, num_classes));
  return net;
}

/// Configurable VGG-like 3x3 conv stack: `depth` convs spread over three
/// stages (32, 64, 128 channels) with 2x2 pooling, then fc-256, fc-256,
/// fc-classes. An approximation of a deeper chain network, not a
/// reproduction of a specific published one.
inline NetworkSpec build_vggish(std::size_t depth, bool star, bool sort, std::size_t num_classes = 10) {
  if (depth < 3) throw Error(ErrorKind::InvalidConfig, "vggish depth must be >= 3");
  NetworkSpec net;
  net.name = "vggish" + std::to_string(depth) + (star ? "_star" : "") + (star && sort ? "_sort" : "");
  net.input_shape = {3, 32, 32};
  net.num_classes = num_classes;
  const FusionSpec fusion = sort ? FusionSpec::sort_branched() : FusionSpec::linear();
  std::size_t in = 3;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t c = 32u << stage;
    const std::size_t convs = depth / 3 + (stage == 2 ? depth % 3 : 0);
    for (std::size_t i = 0; i < convs; ++i) {
      const LayerSpec conv = LayerSpec::conv(in, c, 3, 1, 1);
      if (star) {
        net.layers.push_back(branch_transform(conv, fusion));
      } else {
        net.layers.push_back(conv);
        net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
      }
      in = c;
    }
    net.layers.push_back(LayerSpec::pool(2, 2));
  }
  net.layers.push_back(LayerSpec::simple(LayerKind::Flatten));
  net.layers.push_back(LayerSpec::fc(in * 4 * 4, 256));
  net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
  net.layers.push_back(LayerSpec::fc(256, 256));
  net.layers.push_back(LayerSpec::simple(LayerKind::Relu));
  net.layers.push_back(LayerSpec::fc(256, num_classes));
  return net;
}

// Linear classifier on flat features.
inline NetworkSpec build_linear(std::size_t in_dim, std::size_t num_classes) {
  return {"linear", {in_dim}, {LayerSpec::fc(in_dim, num_classes)}, num_classes};
}

inline NetworkSpec build_mlp(std::size_t in_dim, std::size_t hidden, std::size_t num_classes) {
  return {"mlp",
          {in_dim},
          {LayerSpec::fc(in_dim, hidden), LayerSpec::simple(LayerKind::Relu), LayerSpec::fc(hidden, num_classes)},
          num_classes};
}

/// One hidden layer made of two fc+ReLU branches joined by `fusion`.
inline NetworkSpec build_branch_mlp(std::size_t in_dim, std::size_t hidden, std::size_t num_classes,
                                    const FusionSpec& fusion) {
  LayerSpec block;
  block.kind = LayerKind::BranchBlock;
  block.channels_in = in_dim;
  block.channels_out = hidden;
  block.fusion = fusion;
  const std::vector<LayerSpec> branch{LayerSpec::fc(in_dim, hidden), LayerSpec::simple(LayerKind::Relu)};
  block.branches = {branch, branch};
  return {"branch_mlp", {in_dim}, {block, LayerSpec::fc(hidden, num_classes)}, num_classes};
}

// ---------------------------------------------------------------------------
// Serialization (JSON: key-value objects with nested layer lists)
// ---------------------------------------------------------------------------

inline nlohmann::json fusion_to_json(const FusionSpec& f) {
  return {{"terms", f.terms()},
          {"prod_wrapper", f.prod_wrapper == ProductWrapper::SqrtEps ? "sqrt_eps" : "identity"},
          {"eps", f.eps},
          {"prod_input_gate", f.prod_input_gate == ProductGate::ReluBoth ? "relu_both" : "none"},
          {"prod_form", f.prod_form == ProductForm::SelfSquare ? "self_square" : "cross"}};
}

inline FusionSpec fusion_from_json(const nlohmann::json& j) {
  FusionSpec f;
  const std::string wrapper = j.value("prod_wrapper", "identity");
  const std::string gate = j.value("prod_input_gate", "none");
  const std::string form = j.value("prod_form", "cross");
  if (wrapper != "identity" && wrapper != "sqrt_eps") throw Error(ErrorKind::InvalidConfig, "prod_wrapper " + wrapper);
  if (gate != "none" && gate != "relu_both") throw Error(ErrorKind::InvalidConfig, "prod_input_gate " + gate);
  if (form != "cross" && form != "self_square") throw Error(ErrorKind::InvalidConfig, "prod_form " + form);
  f.prod_wrapper = wrapper == "sqrt_eps" ? ProductWrapper::SqrtEps : ProductWrapper::Identity;
  f.prod_input_gate = gate == "relu_both" ? ProductGate::ReluBoth : ProductGate::None;
  f.prod_form = form == "self_square" ? ProductForm::SelfSquare : ProductForm::Cross;
  f.eps = j.value("eps", 1e-4);
  return f.with_terms(j.value("terms", std::string("sum")));
}

inline nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers);

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", std::string(to_string(l.kind))}};
  switch (l.kind) {
    case LayerKind::Conv:
      j.update({{"k", l.k}, {"in", l.channels_in}, {"out", l.channels_out}, {"stride", l.stride}, {"pad", l.pad},
                {"bias", l.bias}});
      break;
    case LayerKind::Pool:
      j.update({{"k", l.k}, {"stride", l.stride}});
      break;
    case LayerKind::Fc:
      j.update({{"in", l.channels_in}, {"out", l.channels_out}});
      break;
    case LayerKind::BatchNorm:
      j["channels"] = l.channels_in;
      break;
    case LayerKind::BranchBlock:
      j.update({{"k", l.k}, {"in", l.channels_in}, {"out", l.channels_out}, {"stride", l.stride}, {"pad", l.pad}});
      j["fusion"] = fusion_to_json(l.fusion);
      j["branches"] = nlohmann::json::array();
      for (const auto& b : l.branches) j["branches"].push_back(layers_to_json(b));
      break;
    case LayerKind::ResidualBlock:
      j.update({{"k", l.k}, {"in", l.channels_in}, {"out", l.channels_out}, {"stride", l.stride}});
      j["fusion"] = fusion_to_json(l.fusion);
      j["body"] = layers_to_json(l.body);
      j["shortcut"] = layers_to_json(l.shortcut);
      break;
    default:
      break;
  }
  return j;
}

inline nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers) {
  auto arr = nlohmann::json::array();
  for (const auto& l : layers) arr.push_back(layer_to_json(l));
  return arr;
}

inline std::vector<LayerSpec> layers_from_json(const nlohmann::json& arr);

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.k = j.value("k", std::size_t{0});
  l.channels_in = j.value("in", std::size_t{0});
  l.channels_out = j.value("out", std::size_t{0});
  l.stride = j.value("stride", std::size_t{1});
  l.pad = j.value("pad", std::size_t{0});
  l.bias = j.value("bias", true);
  if (l.kind == LayerKind::BatchNorm) l.channels_in = l.channels_out = j.at("channels").get<std::size_t>();
  if (j.contains("fusion")) l.fusion = fusion_from_json(j.at("fusion"));
  if (j.contains("branches")) {
    for (const auto& b : j.at("branches")) l.branches.push_back(layers_from_json(b));
  }
  if (j.contains("body")) l.body = layers_from_json(j.at("body"));
  if (j.contains("shortcut")) l.shortcut = layers_from_json(j.at("shortcut"));
  return l;
}

inline std::vector<LayerSpec> layers_from_json(const nlohmann::json& arr) {
  std::vector<LayerSpec> layers;
  for (const auto& j : arr) layers.push_back(layer_from_json(j));
  return layers;
}

inline nlohmann::json to_json(const NetworkSpec& net) {
  return {{"name", net.name},
          {"input_shape", net.input_shape},
          {"num_classes", net.num_classes},
          {"layers", layers_to_json(net.layers)}};
}

inline NetworkSpec network_from_json(const nlohmann::json& j) {
  try {
    NetworkSpec net;
    net.name = j.value("name", std::string("custom"));
    net.input_shape = j.at("input_shape").get<Shape>();
    net.num_classes = j.at("num_classes").get<std::size_t>();
    net.layers = layers_from_json(j.at("layers"));
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("network config: ") + e.what());
  }
}

inline NetworkSpec load_network(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
  try {
    return network_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
}

inline void save_network(const NetworkSpec& net, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  os << to_json(net).dump(2) << '\n';
}

}  // namespace sortnet

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sortnet/fusion.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/rng.hpp"
#include "sortnet/tape.hpp"

namespace sortnet {

namespace detail {

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var forward(Tape& tape, Var x, Mode mode) = 0;
  virtual void collect(std::vector<Param*>& out) { (void)out; }
  // Multiplies the initial weights by `gain`; false for layers without any.
  virtual bool scale_weights(double gain) {
    (void)gain;
    return false;
  }
};

using LayerList = std::vector<std::unique_ptr<Layer>>;

inline Var run_layers(LayerList& layers, Tape& tape, Var x, Mode mode) {
  for (auto& l : layers) x = l->forward(tape, x, mode);
  return x;
}

// He initialization: N(0, 2/fan_in).
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

class ConvLayer final : public Layer {
 public:
  ConvLayer(const LayerSpec& s, Rng& rng, const std::string& name)
      : weight_(name + ".w", he_normal({s.channels_out, s.channels_in, s.k, s.k}, s.channels_in * s.k * s.k, rng)),
        stride_(s.stride),
        pad_(s.pad) {
    if (s.bias) bias_.emplace(name + ".b", Tensor::zeros({s.channels_out}));
  }
  Var forward(Tape& tape, Var x, Mode) override {
    std::optional<Var> b;
    if (bias_) b = tape.param(*bias_);
    return conv2d(x, tape.param(weight_), b, stride_, pad_);
  }
  void collect(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
  }
  bool scale_weights(double gain) override {
    for (std::size_t i = 0; i < weight_.value.size(); ++i) weight_.value[i] *= gain;
    return true;
  }

 private:
  Param weight_;
  std::optional<Param> bias_;
  std::size_t stride_, pad_;
};

class FcLayer final : public Layer {
 public:
  FcLayer(const LayerSpec& s, Rng& rng, const std::string& name)
      : weight_(name + ".w", he_normal({s.channels_out, s.channels_in}, s.channels_in, rng)),
        bias_(name + ".b", Tensor::zeros({s.channels_out})) {}
  Var forward(Tape& tape, Var x, Mode) override { return fc(x, tape.param(weight_), tape.param(bias_)); }
  void collect(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  bool scale_weights(double gain) override {
    for (std::size_t i = 0; i < weight_.value.size(); ++i) weight_.value[i] *= gain;
    return true;
  }

 private:
  Param weight_, bias_;
};

class BatchNormLayer final : public Layer {
 public:
  BatchNormLayer(const LayerSpec& s, const std::string& name)
      : gamma_(name + ".gamma", Tensor::ones({s.channels_in})),
        beta_(name + ".beta", Tensor::zeros({s.channels_in})),
        state_(s.channels_in) {}
  Var forward(Tape& tape, Var x, Mode mode) override {
    return batchnorm(x, tape.param(gamma_), tape.param(beta_), state_, mode);
  }
  void collect(std::vector<Param*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  Param gamma_, beta_;
  BatchNormState state_;
};

class FnLayer final : public Layer {
 public:
  explicit FnLayer(LayerSpec s) : spec_(std::move(s)) {}
  Var forward(Tape&, Var x, Mode) override {
    switch (spec_.kind) {
      case LayerKind::Relu: return relu(x);
      case LayerKind::Pool: return maxpool2d(x, spec_.k, spec_.stride);
      case LayerKind::Flatten: return flatten(x);
      case LayerKind::GlobalAvgPool: return global_avg_pool(x);
      default: throw Error(ErrorKind::InvalidConfig, "not a parameter-free layer");
    }
  }

 private:
  LayerSpec spec_;
};

inline LayerList build_layers(const std::vector<LayerSpec>& specs, Rng& rng, const std::string& prefix);

// Init gain for the last weighted layer of each branch. With plain He init
// a product block maps response scale s to about 2s + s^2, and the 3x3 max
// pools amplify it again, so LeNet*-SORT starts with logits near 1e4 and
// diverges at any usable learning rate. 0.25 is the largest power-of-two
// gain that trains at 1e-2; 0.5 still diverges. Applied whatever the fusion,
// so SORT and linear-sum twins start from identical weights.
inline constexpr double kBranchOutputGain = 0.25;

class BranchBlockLayer final : public Layer {
 public:
  BranchBlockLayer(const LayerSpec& s, Rng& rng, const std::string& name)
      : first_(build_layers(s.branches.at(0), rng, name + ".b1")),
        second_(build_layers(s.branches.at(1), rng, name + ".b2")),
        fusion_(s.fusion) {
    for (LayerList* branch : {&first_, &second_}) {
      for (auto it = branch->rbegin(); it != branch->rend(); ++it) {
        if ((*it)->scale_weights(kBranchOutputGain)) break;
      }
    }
  }
  Var forward(Tape& tape, Var x, Mode mode) override {
    Var f1 = run_layers(first_, tape, x, mode);
    Var f2 = run_layers(second_, tape, x, mode);
    return sort_fuse(f1, f2, fusion_);
  }
  void collect(std::vector<Param*>& out) override {
    for (auto& l : first_) l->collect(out);
    for (auto& l : second_) l->collect(out);
  }

 private:
  LayerList first_, second_;
  FusionSpec fusion_;
};

// Fuses the shortcut (F1 = x or its projection) with the residual body F(x).
class ResidualBlockLayer final : public Layer {
 public:
  ResidualBlockLayer(const LayerSpec& s, Rng& rng, const std::string& name)
      : body_(build_layers(s.body, rng, name + ".body")),
        shortcut_(build_layers(s.shortcut, rng, name + ".proj")),
        fusion_(s.fusion) {}
  Var forward(Tape& tape, Var x, Mode mode) override {
    Var fx = run_layers(body_, tape, x, mode);
    Var skip = run_layers(shortcut_, tape, x, mode);
    return sort_fuse(skip, fx, fusion_);
  }
  void collect(std::vector<Param*>& out) override {
    for (auto& l : body_) l->collect(out);
    for (auto& l : shortcut_) l->collect(out);
  }

 private:
  LayerList body_, shortcut_;
  FusionSpec fusion_;
};

inline LayerList build_layers(const std::vector<LayerSpec>& specs, Rng& rng, const std::string& prefix) {
  LayerList layers;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const std::string name = prefix + "." + std::to_string(i) + "." + std::string(to_string(s.kind));
    switch (s.kind) {
      case LayerKind::Conv: layers.push_back(std::make_unique<ConvLayer>(s, rng, name)); break;
      case LayerKind::Fc: layers.push_back(std::make_unique<FcLayer>(s, rng, name)); break;
      case LayerKind::BatchNorm: layers.push_back(std::make_unique<BatchNormLayer>(s, name)); break;
      case LayerKind::BranchBlock: layers.push_back(std::make_unique<BranchBlockLayer>(s, rng, name)); break;
      case LayerKind::ResidualBlock: layers.push_back(std::make_unique<ResidualBlockLayer>(s, rng, name)); break;
      default: layers.push_back(std::make_unique<FnLayer>(s)); break;
    }
  }
  return layers;
}

}  // namespace detail

/// Runtime instance of a NetworkSpec: owns parameters and batchnorm running
/// statistics. Parameters are addressed by the tapes it records on, so the
/// object is neither copyable nor movable.
class Network {
 public:
  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    infer_shapes(spec_);
    Rng rng(seed);
    layers_ = detail::build_layers(spec_.layers, rng, "net");
    for (auto& l : layers_) l->collect(params_);
  }
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// x: [N, input_shape...].
  Var forward(Tape& tape, Var x, Mode mode) {
    const Shape& in = x.shape();
    if (in.size() != spec_.input_shape.size() + 1 || !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(),
                                                                  in.begin() + 1)) {
      throw Error(ErrorKind::ShapeMismatch, spec_.name + " expects [N," + shape_str(spec_.input_shape) + "], got " +
                                                shape_str(in));
    }
    return detail::run_layers(layers_, tape, x, mode);
  }

  const std::vector<Param*>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Param* p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  detail::LayerList layers_;
  std::vector<Param*> params_;
};

}  // namespace sortnet

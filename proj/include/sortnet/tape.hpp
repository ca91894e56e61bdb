#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sortnet/error.hpp"
#include "sortnet/tensor.hpp"

namespace sortnet {

/// A trainable tensor together with its accumulated gradient.
struct Param {
  Param() = default;
  Param(std::string param_name, Tensor initial)
      : name(std::move(param_name)), value(std::move(initial)), grad(Tensor::zeros(value.shape())), id(next_id()) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
  std::uint64_t id = 0;

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records the forward computation in execution order so that the reverse
/// sweep in backward() is a plain reverse iteration.
class Tape {
 public:
  // Reads the upstream gradient of the node and accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  // Piecewise ops report how far their inputs sit from a non-differentiable
  // point when tracking is on; the gradient audit redraws close instances.
  void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
  bool track_kinks() const noexcept { return track_kinks_; }
  void note_kink_margin(Var v, double margin) { nodes_.at(v.id).kink_margin = margin; }
  double kink_margin(std::size_t id) const { return nodes_.at(id).kink_margin; }

  Var constant(Tensor value) { return push("constant", std::move(value), {}, nullptr, false, nullptr); }

  // Leaf whose gradient is readable through grad() after backward().
  Var leaf(Tensor value) { return push("leaf", std::move(value), {}, nullptr, grad_enabled_, nullptr); }

  // Leaf bound to a Param; backward() accumulates into param.grad.
  Var param(Param& p) {
    return push("param:" + p.name, p.value, {}, nullptr, grad_enabled_, grad_enabled_ ? &p : nullptr);
  }

  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const auto& v : inputs) {
      if (v.tape != this) throw Error(ErrorKind::InvalidConfig, op + ": input recorded on another tape");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(op), std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs,
                nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of an input to accumulate into, or nullptr when the
  // input does not take part in differentiation.
  Tensor* grad_sink(std::size_t id) {
    auto& node = nodes_.at(id);
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad = Tensor::zeros(node.value.shape());
    return &node.grad;
  }

  // Gradient of the last backward() target with respect to v; zeros when
  // v was not reached.
  Tensor grad(Var v) const {
    const auto& node = nodes_.at(v.id);
    if (node.grad.empty()) return Tensor::zeros(node.value.shape());
    return node.grad;
  }

  void backward(Var loss) {
    if (loss.tape != this) throw Error(ErrorKind::InvalidConfig, "backward: loss recorded on another tape");
    if (nodes_[loss.id].value.size() != 1) {
      throw Error(ErrorKind::ShapeMismatch, "backward target must hold one element, got " +
                                                shape_str(nodes_[loss.id].value.shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    for (auto& node : nodes_) node.grad = Tensor();
    *grad_sink(loss.id) = Tensor::ones(nodes_[loss.id].value.shape());
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, node.grad);
      if (node.param != nullptr) {
        auto dst = node.param->grad.data();
        auto src = node.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Param* param = nullptr;
    Tensor grad;
    double kink_margin = std::numeric_limits<double>::infinity();
  };

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward, bool requires_grad,
           Param* param) {
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs), std::move(backward), requires_grad,
                          param, Tensor(), std::numeric_limits<double>::infinity()});
    return Var{this, nodes_.size() - 1};
  }

  // deque keeps references to earlier values valid while new nodes are pushed.
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool track_kinks_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace sortnet

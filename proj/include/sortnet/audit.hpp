#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sortnet/fusion.hpp"
#include "sortnet/gradcheck.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/network.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/rng.hpp"

namespace sortnet {

enum class AuditScope { Fusion, AllOps, FullNet };

struct OpAudit {
  std::string op;
  std::size_t instances = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct AuditReport {
  std::vector<OpAudit> ops;
  double tol = 0.0;

  bool pass() const {
    for (const auto& o : ops) {
      if (!o.pass) return false;
    }
    return true;
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> names;
    for (const auto& o : ops) {
      if (!o.pass) names.push_back(o.op);
    }
    return names;
  }
};

namespace audit {

/// One randomly drawn check: owned params plus the scalar function of them.
struct Instance {
  std::vector<std::unique_ptr<Param>> owned;
  ScalarFn f;
  Network* net = nullptr;
  std::shared_ptr<Network> net_owner;

  Param* add(const std::string& name, Tensor value) {
    owned.push_back(std::make_unique<Param>(name, std::move(value)));
    return owned.back().get();
  }

  std::vector<Param*> params() const {
    if (net) return net->params();
    std::vector<Param*> out;
    for (const auto& p : owned) out.push_back(p.get());
    return out;
  }
};

using Factory = std::function<Instance(Rng&)>;

struct Case {
  std::string op;
  Factory make;
};

// Entries of magnitude in [lo, hi] with random sign.
inline Tensor away_from_zero(Shape shape, Rng& rng, double lo = 0.2, double hi = 1.2) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

// b = a +/- [0.1, 1], so max(a, b) never ties within a finite-difference step.
inline Tensor offset_from(const Tensor& a, Rng& rng) {
  Tensor b(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return b;
}

// Distinct values 0.01 apart in random order: pooling windows have no ties.
inline Tensor distinct_values(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  auto order = rng.permutation(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = -1.0 + 0.01 * static_cast<double>(order[i]);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(rng.below(classes));
  return labels;
}

using Unary = std::function<Var(Var)>;
using Binary = std::function<Var(Var, Var)>;

inline Case unary_case(std::string op, Shape shape, std::function<Tensor(const Shape&, Rng&)> draw, Unary fn) {
  return {op, [shape, draw, fn](Rng& rng) {
            Instance inst;
            Param* a = inst.add("a", draw(shape, rng));
            Tape probe(false);
            const Shape out_shape = fn(probe.constant(a->value)).shape();
            const Tensor weights = Tensor::uniform(out_shape, rng, -1.0, 1.0);
            inst.f = [a, fn, weights](Tape& t) { return weighted_sum(fn(t.param(*a)), weights); };
            return inst;
          }};
}

inline Case binary_case(std::string op, Shape shape, std::function<std::pair<Tensor, Tensor>(const Shape&, Rng&)> draw,
                        Binary fn) {
  return {op, [shape, draw, fn](Rng& rng) {
            Instance inst;
            auto [av, bv] = draw(shape, rng);
            Param* a = inst.add("a", std::move(av));
            Param* b = inst.add("b", std::move(bv));
            const Tensor weights = Tensor::uniform(shape, rng, -1.0, 1.0);
            inst.f = [a, b, fn, weights](Tape& t) { return weighted_sum(fn(t.param(*a), t.param(*b)), weights); };
            return inst;
          }};
}

inline std::pair<Tensor, Tensor> normal_pair(const Shape& s, Rng& rng) {
  return {Tensor::randn(s, rng), Tensor::randn(s, rng)};
}
inline std::pair<Tensor, Tensor> tie_free_pair(const Shape& s, Rng& rng) {
  Tensor a = away_from_zero(s, rng);
  Tensor b = offset_from(a, rng);
  // keep b away from the relu gate's kink as well
  for (auto& v : b.data()) {
    if (std::abs(v) < 0.1) v += v < 0 ? -0.2 : 0.2;
  }
  return {std::move(a), std::move(b)};
}
inline std::pair<Tensor, Tensor> positive_pair(const Shape& s, Rng& rng) {
  return {Tensor::uniform(s, rng, 0.2, 1.5), Tensor::uniform(s, rng, 0.2, 1.5)};
}

/// Smallest distance of any piecewise op on the tape from its kink; the
/// tape must have been recorded with kink tracking on.
inline double min_kink_margin(const Tape& tape) {
  double margin = INFINITY;
  for (std::size_t id = 0; id < tape.size(); ++id) margin = std::min(margin, tape.kink_margin(id));
  return margin;
}

inline std::vector<Case> fusion_cases() {
  std::vector<Case> cases;
  const Shape shape{3, 4};
  const auto identity_rows = ablation_rows(FusionSpec::sort_branched());
  const auto sqrt_rows = ablation_rows(FusionSpec::residual_sort());
  for (const auto& spec : identity_rows) {
    cases.push_back(binary_case("sort_fuse[" + spec.terms() + ",identity]", shape, tie_free_pair,
                                [spec](Var a, Var b) { return sort_fuse(a, b, spec); }));
  }
  for (const auto& spec : sqrt_rows) {
    cases.push_back(binary_case("sort_fuse[" + spec.terms() + ",sqrt_eps,relu_both]", shape, tie_free_pair,
                                [spec](Var a, Var b) { return sort_fuse(a, b, spec); }));
  }
  FusionSpec ungated_sqrt = FusionSpec::sort_branched();
  ungated_sqrt.prod_wrapper = ProductWrapper::SqrtEps;
  cases.push_back(binary_case("sort_fuse[sum+prod,sqrt_eps,none]", shape, positive_pair,
                              [ungated_sqrt](Var a, Var b) { return sort_fuse(a, b, ungated_sqrt); }));
  FusionSpec square = FusionSpec::sort_branched();
  square.prod_form = ProductForm::SelfSquare;
  cases.push_back(binary_case("sort_fuse[sum+prod,self_square]", shape, tie_free_pair,
                              [square](Var a, Var b) { return sort_fuse(a, b, square); }));
  cases.push_back(binary_case("residual_sort_fuse", shape, tie_free_pair,
                              [](Var a, Var b) { return residual_sort_fuse(a, b); }));
  return cases;
}

inline std::vector<Case> op_cases() {
  std::vector<Case> cases;
  const Shape small{2, 3};
  auto normal = [](const Shape& s, Rng& rng) { return Tensor::randn(s, rng); };
  auto away = [](const Shape& s, Rng& rng) { return away_from_zero(s, rng); };
  cases.push_back(binary_case("ew_add", small, normal_pair, [](Var a, Var b) { return ew_add(a, b); }));
  cases.push_back(binary_case("ew_mul", small, normal_pair, [](Var a, Var b) { return ew_mul(a, b); }));
  cases.push_back(binary_case("ew_max", small, tie_free_pair, [](Var a, Var b) { return ew_max(a, b); }));
  cases.push_back(unary_case("relu", small, away, [](Var a) { return relu(a); }));
  cases.push_back(unary_case(
      "ew_sqrt_shift", small, [](const Shape& s, Rng& rng) { return Tensor::uniform(s, rng, 0.1, 4.0); },
      [](Var a) { return ew_sqrt_shift(a, 1e-4); }));
  cases.push_back(unary_case("ew_square", small, normal, [](Var a) { return ew_square(a); }));
  cases.push_back(unary_case("scale", small, normal, [](Var a) { return scale(a, -1.7); }));
  cases.push_back({"sum", [](Rng& rng) {
                     Instance inst;
                     Param* a = inst.add("a", Tensor::randn({2, 3}, rng));
                     inst.f = [a](Tape& t) { return sum(t.param(*a)); };
                     return inst;
                   }});
  cases.push_back(unary_case("flatten", {2, 3, 2, 2}, normal, [](Var a) { return flatten(a); }));
  cases.push_back(unary_case("global_avg_pool", {2, 3, 3, 3}, normal, [](Var a) { return global_avg_pool(a); }));
  cases.push_back(unary_case(
      "maxpool2d", {2, 2, 7, 7}, [](const Shape& s, Rng& rng) { return distinct_values(s, rng); },
      [](Var a) { return maxpool2d(a, 3, 2); }));

  auto conv_case = [](std::string name, std::size_t stride, std::size_t pad, bool bias) {
    return Case{name, [stride, pad, bias](Rng& rng) {
                  Instance inst;
                  Param* x = inst.add("x", Tensor::randn({2, 3, 5, 5}, rng));
                  Param* w = inst.add("w", Tensor::randn({2, 3, 3, 3}, rng, 0.5));
                  Param* b = bias ? inst.add("b", Tensor::randn({2}, rng)) : nullptr;
                  const std::size_t o = conv_out_size(5, 3, stride, pad);
                  const Tensor weights = Tensor::uniform({2, 2, o, o}, rng, -1.0, 1.0);
                  inst.f = [x, w, b, stride, pad, weights](Tape& t) {
                    std::optional<Var> bv;
                    if (b) bv = t.param(*b);
                    return weighted_sum(conv2d(t.param(*x), t.param(*w), bv, stride, pad), weights);
                  };
                  return inst;
                }};
  };
  cases.push_back(conv_case("conv2d", 1, 1, true));
  cases.push_back(conv_case("conv2d[stride2,pad0,nobias]", 2, 0, false));

  cases.push_back({"fc", [](Rng& rng) {
                     Instance inst;
                     Param* x = inst.add("x", Tensor::randn({3, 4}, rng));
                     Param* w = inst.add("w", Tensor::randn({5, 4}, rng));
                     Param* b = inst.add("b", Tensor::randn({5}, rng));
                     const Tensor weights = Tensor::uniform({3, 5}, rng, -1.0, 1.0);
                     inst.f = [x, w, b, weights](Tape& t) {
                       return weighted_sum(fc(t.param(*x), t.param(*w), t.param(*b)), weights);
                     };
                     return inst;
                   }});

  auto bn_case = [](std::string name, Mode mode) {
    return Case{name, [mode](Rng& rng) {
                  Instance inst;
                  Param* x = inst.add("x", Tensor::randn({4, 3, 2, 2}, rng));
                  Param* gamma = inst.add("gamma", Tensor::uniform({3}, rng, 0.5, 1.5));
                  Param* beta = inst.add("beta", Tensor::randn({3}, rng));
                  auto state = std::make_shared<BatchNormState>(3);
                  state->running_mean = Tensor::randn({3}, rng, 0.3);
                  state->running_var = Tensor::uniform({3}, rng, 0.5, 2.0);
                  const Tensor weights = Tensor::uniform({4, 3, 2, 2}, rng, -1.0, 1.0);
                  inst.f = [x, gamma, beta, state, mode, weights](Tape& t) {
                    // running statistics must not drift between evaluations
                    BatchNormState local = *state;
                    return weighted_sum(batchnorm(t.param(*x), t.param(*gamma), t.param(*beta), local, mode), weights);
                  };
                  return inst;
                }};
  };
  cases.push_back(bn_case("batchnorm[train]", Mode::Train));
  cases.push_back(bn_case("batchnorm[eval]", Mode::Eval));

  cases.push_back({"softmax_xent", [](Rng& rng) {
                     Instance inst;
                     Param* logits = inst.add("logits", Tensor::randn({4, 5}, rng, 2.0));
                     const auto labels = random_labels(4, 5, rng);
                     inst.f = [logits, labels](Tape& t) { return softmax_xent(t.param(*logits), labels).loss; };
                     return inst;
                   }});
  return cases;
}

/// Two branched conv layers (LeNet* style) + pooling + fc + softmax loss.
inline NetworkSpec small_branched_net() {
  NetworkSpec net;
  net.name = "lenet_star_2layer";
  net.input_shape = {3, 8, 8};
  net.num_classes = 5;
  net.layers.push_back(branch_transform(LayerSpec::conv(3, 4, 5, 1, 2), FusionSpec::sort_branched()));
  net.layers.push_back(LayerSpec::pool(3, 2));
  net.layers.push_back(branch_transform(LayerSpec::conv(4, 4, 3, 1, 1), FusionSpec::sort_branched()));
  net.layers.push_back(LayerSpec::simple(LayerKind::Flatten));
  net.layers.push_back(LayerSpec::fc(4 * 3 * 3, 5));
  return net;
}

inline std::vector<Case> full_net_cases() {
  return {{"lenet_star_2layer", [](Rng& rng) {
             Instance inst;
             inst.net_owner = std::make_shared<Network>(small_branched_net(), rng.next_u64());
             inst.net = inst.net_owner.get();
             // One sample: mirrored mispredictions in a batch cancel the
             // bias gradient far below the finite-difference noise floor.
             const Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
             const auto labels = random_labels(1, 5, rng);
             Network* net = inst.net;
             inst.f = [net, x, labels](Tape& t) {
               return softmax_xent(net->forward(t, t.constant(x), Mode::Train), labels).loss;
             };
             return inst;
           }}};
}

// Instances with any ReLU input, max operand pair or pooling window within
// this distance of a kink are redrawn: central differences are not meaningful across a kink.
inline constexpr double kKinkMargin = 1e-3;

inline OpAudit run_case(const Case& c, std::size_t instances, Rng& rng, double h, double tol) {
  OpAudit result{c.op, 0, 0.0, true};
  std::size_t redraws = 0;
  while (result.instances < instances) {
    Instance inst = c.make(rng);
    {
      Tape probe(false);
      probe.set_track_kinks(true);
      inst.f(probe);
      if (min_kink_margin(probe) < kKinkMargin && redraws < 50 * instances) {
        ++redraws;
        continue;
      }
    }
    const auto params = inst.params();
    const GradCheckReport r = grad_check(inst.f, params, h, tol);
    result.max_rel_err = std::max(result.max_rel_err, r.max_rel_err);
    ++result.instances;
  }
  result.pass = result.max_rel_err <= tol;
  return result;
}

}  // namespace audit

inline std::vector<audit::Case> audit_cases(AuditScope scope) {
  switch (scope) {
    case AuditScope::Fusion: return audit::fusion_cases();
    case AuditScope::FullNet: return audit::full_net_cases();
    case AuditScope::AllOps: {
      auto cases = audit::op_cases();
      for (auto& c : audit::fusion_cases()) cases.push_back(std::move(c));
      return cases;
    }
  }
  return {};
}

/// Finite-difference audit of every case in `scope`, `instances` random
/// draws each.
inline AuditReport run_gradcheck(AuditScope scope, std::size_t instances = 100, std::uint64_t seed = 1,
                                 double h = 1e-5, double tol = 1e-5) {
  AuditReport report;
  report.tol = tol;
  Rng rng(seed);
  for (const auto& c : audit_cases(scope)) report.ops.push_back(audit::run_case(c, instances, rng, h, tol));
  return report;
}

}  // namespace sortnet

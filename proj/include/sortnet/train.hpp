#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sortnet/data.hpp"
#include "sortnet/error.hpp"
#include "sortnet/network.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/rng.hpp"

namespace sortnet {

struct LrSection {
  double lr = 0.0;
  std::size_t iters = 0;

  friend bool operator==(const LrSection&, const LrSection&) = default;
};

struct TrainConfig {
  std::vector<LrSection> sections;
  std::size_t batch_size = 100;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // 0: evaluate once, after the last section
  std::size_t eval_batch = 500;
  bool augment = false;

  std::size_t total_iters() const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.iters;
    return n;
  }

  void validate() const {
    if (sections.empty()) throw Error(ErrorKind::InvalidConfig, "at least one LR section is required");
    for (const auto& s : sections) {
      if (!std::isfinite(s.lr) || s.lr < 0.0) throw Error(ErrorKind::InvalidConfig, "learning rate must be >= 0");
      if (s.iters == 0) throw Error(ErrorKind::InvalidConfig, "LR section needs iters > 0");
    }
    if (batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidConfig, "momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidConfig, "weight_decay must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Multiplies every section's iteration count by `factor` (at least 1 each),
/// keeping the schedule's shape.
inline std::vector<LrSection> scale_sections(std::vector<LrSection> sections, double factor) {
  if (!(factor > 0.0)) throw Error(ErrorKind::InvalidConfig, "scale factor must be positive");
  for (auto& s : sections) {
    s.iters = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(s.iters) * factor)));
  }
  return sections;
}

struct MetricRecord {
  std::size_t iter = 0;
  std::string split;  // "train" (per-iteration batch) or "test"
  double loss = 0.0;
  double error_pct = 0.0;
  double elapsed_s = 0.0;
};

struct RunMetrics {
  std::vector<MetricRecord> records;
  bool diverged = false;
  std::size_t diverged_at = 0;

  std::optional<double> final_error(const std::string& split = "test") const {
    for (auto it = records.rbegin(); it != records.rend(); ++it) {
      if (it->split == split) return it->error_pct;
    }
    return std::nullopt;
  }

  std::vector<double> losses(const std::string& split = "train") const {
    std::vector<double> out;
    for (const auto& r : records) {
      if (r.split == split) out.push_back(r.loss);
    }
    return out;
  }

  // Mean wall-clock seconds per 20 training iterations.
  double seconds_per_20_iters() const {
    std::size_t last_iter = 0;
    double last_time = 0.0;
    for (const auto& r : records) {
      if (r.split == "train") {
        last_iter = r.iter;
        last_time = r.elapsed_s;
      }
    }
    return last_iter == 0 ? 0.0 : 20.0 * last_time / static_cast<double>(last_iter);
  }
};

/// Equal iteration indices, losses and error rates; timings are ignored.
inline bool same_trajectory(const RunMetrics& a, const RunMetrics& b) {
  if (a.records.size() != b.records.size() || a.diverged != b.diverged) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.iter != y.iter || x.split != y.split || x.error_pct != y.error_pct) return false;
    if (!(x.loss == y.loss || (std::isnan(x.loss) && std::isnan(y.loss)))) return false;
  }
  return true;
}

inline void write_metrics_csv(std::ostream& os, const RunMetrics& m) {
  os << "iter,split,loss,error_pct,elapsed_s\n";
  char buf[160];
  for (const auto& r : m.records) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.4f,%.3f\n", r.iter, r.split.c_str(), r.loss, r.error_pct,
                  r.elapsed_s);
    os << buf;
  }
}

inline void write_metrics_csv(const std::string& path, const RunMetrics& m) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  write_metrics_csv(os, m);
}

/// Raised when the training loss becomes NaN or infinite; carries the
/// metrics recorded up to and including the failing iteration.
class DivergedLoss : public Error {
 public:
  DivergedLoss(std::size_t iter, RunMetrics partial)
      : Error(ErrorKind::DivergedLoss, "non-finite loss at iteration " + std::to_string(iter)),
        metrics(std::move(partial)) {}

  RunMetrics metrics;
};

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v.
inline void sgd_step(Param& p, Tensor& velocity, double lr, double momentum, double weight_decay) {
  require_same_shape(p.value, velocity, "sgd_step");
  if (!p.grad.all_finite()) throw Error(ErrorKind::NonFiniteGradient, "gradient of " + p.name + " is not finite");
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * (p.grad[i] + weight_decay * p.value[i]);
    p.value[i] += velocity[i];
  }
}

class Sgd {
 public:
  Sgd(std::vector<Param*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (Param* p : params_) velocity_.push_back(Tensor::zeros(p->value.shape()));
  }

  void step(double lr) {
    for (Param* p : params_) {
      if (!p->grad.all_finite()) throw Error(ErrorKind::NonFiniteGradient, "gradient of " + p->name + " is not finite");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) sgd_step(*params_[i], velocity_[i], lr, momentum_, weight_decay_);
  }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> velocity_;
  double momentum_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double error_pct = 0.0;
};

inline void check_compatible(const Network& net, const DatasetHandle& d) {
  if (d.class_count != net.spec().num_classes) {
    throw Error(ErrorKind::InvalidConfig, d.name + " has " + std::to_string(d.class_count) + " classes, network " +
                                              std::to_string(net.spec().num_classes));
  }
  if (d.size() > 0 && d.sample_shape() != net.spec().input_shape) {
    throw Error(ErrorKind::ShapeMismatch, d.name + " samples are " + shape_str(d.sample_shape()) + ", network takes " +
                                              shape_str(net.spec().input_shape));
  }
}

/// Top-1 error (%) and mean loss over a split, batchnorm in eval mode.
inline EvalResult evaluate(Network& net, const DatasetHandle& split, std::size_t batch = 500) {
  if (split.size() == 0) throw Error(ErrorKind::EmptySplit, "cannot evaluate on an empty split");
  check_compatible(net, split);
  batch = std::max<std::size_t>(1, batch);
  double loss_sum = 0.0;
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch) {
    const std::size_t end = std::min(split.size(), start + batch);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    auto [images, labels] = gather(split, idx);
    Tape tape(false);
    Var logits = net.forward(tape, tape.constant(std::move(images)), Mode::Eval);
    auto xent = softmax_xent(logits, labels);
    loss_sum += xent.loss.value()[0] * static_cast<double>(end - start);
    for (std::size_t i = 0; i < labels.size(); ++i) wrong += xent.predicted[i] != labels[i] ? 1 : 0;
  }
  const auto n = static_cast<double>(split.size());
  return {loss_sum / n, 100.0 * static_cast<double>(wrong) / n};
}

/// Runs the LR sections in order with momentum SGD on shuffled mini-batches.
/// Every random choice (shuffle order, augmentation) derives from cfg.seed;
/// parameter initialization is owned by the Network.
inline RunMetrics train(Network& net, const DatasetHandle& data, const DatasetHandle* test, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw Error(ErrorKind::EmptySplit, "training split is empty");
  check_compatible(net, data);
  if (test && test->size() > 0) check_compatible(net, *test);

  const std::size_t batch = std::min(cfg.batch_size, data.size());
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng augment_rng(derive_seed(cfg.seed, 2));
  Sgd sgd(net.params(), cfg.momentum, cfg.weight_decay);
  RunMetrics metrics;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&start] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  auto run_eval = [&](std::size_t iter) {
    if (test == nullptr || test->size() == 0) return;
    const EvalResult r = evaluate(net, *test, cfg.eval_batch);
    metrics.records.push_back({iter, "test", r.loss, r.error_pct, elapsed()});
  };

  std::vector<std::size_t> order = shuffle_rng.permutation(data.size());
  std::size_t cursor = 0;
  std::size_t iter = 0;
  std::vector<std::size_t> idx(batch);
  for (const auto& section : cfg.sections) {
    for (std::size_t s = 0; s < section.iters; ++s) {
      ++iter;
      if (cursor + batch > order.size()) {
        order = shuffle_rng.permutation(data.size());
        cursor = 0;
      }
      std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(cursor), batch, idx.begin());
      cursor += batch;
      auto [images, labels] = gather(data, idx);
      if (cfg.augment) augment_batch(images, augment_rng);

      net.zero_grad();
      Tape tape;
      Var logits = net.forward(tape, tape.constant(std::move(images)), Mode::Train);
      auto xent = softmax_xent(logits, labels);
      const double loss = xent.loss.value()[0];
      std::size_t wrong = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) wrong += xent.predicted[i] != labels[i] ? 1 : 0;
      metrics.records.push_back(
          {iter, "train", loss, 100.0 * static_cast<double>(wrong) / static_cast<double>(batch), elapsed()});
      if (!std::isfinite(loss)) {
        metrics.diverged = true;
        metrics.diverged_at = iter;
        throw DivergedLoss(iter, std::move(metrics));
      }
      tape.backward(xent.loss);
      sgd.step(section.lr);
      if (cfg.eval_every > 0 && iter % cfg.eval_every == 0 && iter != cfg.total_iters()) run_eval(iter);
    }
  }
  run_eval(iter);
  return metrics;
}

}  // namespace sortnet

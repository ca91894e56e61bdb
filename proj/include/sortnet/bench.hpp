#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "sortnet/fusion.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/network.hpp"
#include "sortnet/ops.hpp"

namespace sortnet {

enum class BenchBlock { Residual, Branch };

struct BenchConfig {
  BenchBlock block = BenchBlock::Residual;
  std::size_t channels = 64;
  std::size_t size = 32;
  std::size_t batch = 100;
  std::size_t reps = 30;
  bool self_compare = false;  // time the linear-sum block against itself
  std::uint64_t seed = 1;
};

struct BenchResult {
  double base_median_s = 0.0;
  double sort_median_s = 0.0;
  double ratio = 0.0;  // sort / base
  std::size_t reps = 0;
};

/// A single block on a C x S x S input: the residual basic block
/// (conv-bn-relu-conv-bn) or the branched 3x3 conv.
inline NetworkSpec bench_block_spec(BenchBlock block, std::size_t channels, std::size_t size, bool sort) {
  NetworkSpec net;
  net.input_shape = {channels, size, size};
  if (block == BenchBlock::Residual) {
    net.name = sort ? "residual_block_sort" : "residual_block";
    LayerSpec b;
    b.kind = LayerKind::ResidualBlock;
    b.channels_in = b.channels_out = channels;
    b.k = 3;
    b.fusion = sort ? FusionSpec::residual_sort() : FusionSpec::linear();
    b.body = {LayerSpec::conv(channels, channels, 3, 1, 1, false), LayerSpec::batchnorm(channels),
              LayerSpec::simple(LayerKind::Relu), LayerSpec::conv(channels, channels, 3, 1, 1, false),
              LayerSpec::batchnorm(channels)};
    net.layers.push_back(std::move(b));
  } else {
    net.name = sort ? "branch_block_sort" : "branch_block";
    net.layers.push_back(branch_transform(LayerSpec::conv(channels, channels, 3, 1, 1),
                                          sort ? FusionSpec::sort_branched() : FusionSpec::linear()));
  }
  return net;
}

namespace detail {

inline double time_forward_backward(Network& net, const Tensor& input) {
  Tape tape;
  Var x = tape.constant(input);
  const auto start = std::chrono::steady_clock::now();
  Var out = net.forward(tape, x, Mode::Train);
  tape.backward(sum(out));
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Median forward+backward wall time of the SORT block and its linear-sum
/// twin, measured in alternating order after one warm-up pass each.
inline BenchResult bench_block(const BenchConfig& cfg) {
  if (cfg.reps == 0 || cfg.channels == 0 || cfg.size == 0 || cfg.batch == 0) {
    throw Error(ErrorKind::InvalidConfig, "bench sizes must be positive");
  }
  Network base(bench_block_spec(cfg.block, cfg.channels, cfg.size, false), cfg.seed);
  Network sorted(bench_block_spec(cfg.block, cfg.channels, cfg.size, !cfg.self_compare), cfg.seed);
  Rng rng(derive_seed(cfg.seed, 7));
  const Tensor input = Tensor::randn({cfg.batch, cfg.channels, cfg.size, cfg.size}, rng);

  detail::time_forward_backward(base, input);
  detail::time_forward_backward(sorted, input);
  std::vector<double> base_t, sort_t;
  for (std::size_t r = 0; r < cfg.reps; ++r) {
    if (r % 2 == 0) {
      base_t.push_back(detail::time_forward_backward(base, input));
      sort_t.push_back(detail::time_forward_backward(sorted, input));
    } else {
      sort_t.push_back(detail::time_forward_backward(sorted, input));
      base_t.push_back(detail::time_forward_backward(base, input));
    }
  }
  BenchResult r;
  r.reps = cfg.reps;
  r.base_median_s = detail::median(base_t);
  r.sort_median_s = detail::median(sort_t);
  r.ratio = r.sort_median_s / r.base_median_s;
  return r;
}

}  // namespace sortnet

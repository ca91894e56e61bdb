#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sortnet/sortnet.hpp"

namespace testing_support {

using sortnet::Shape;
using sortnet::Tensor;

// Central differences of a plain function of a flat vector. Independent of
// the library's gradcheck so the two can check each other.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Elementwise max |a-n| / max(|a|,|n|) with a small absolute floor.
inline double max_rel_err(std::span<const double> analytic, std::span<const double> numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Direct seven-loop convolution, [N,C,H,W] * [O,C,K,K] (+ b[O]).
inline Tensor direct_conv(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({n, o, oh, ow});
  for (std::size_t b_ = 0; b_ < n; ++b_)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = b ? (*b)[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x.at(b_, ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                       w[((oc * c + ic) * k + ky) * k + kx];
              }
          out[((b_ * o + oc) * oh + y) * ow + xo] = acc;
        }
  return out;
}

// Receptive field by interval propagation: the span of input rows reachable
// from output row 0 through a list of (kernel, stride, pad) windows, applied
// back to front.
struct Window {
  std::size_t k, stride, pad;
};

inline std::size_t interval_rf(const std::vector<Window>& layers) {
  long lo = 0, hi = 0;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    lo = lo * static_cast<long>(it->stride) - static_cast<long>(it->pad);
    hi = hi * static_cast<long>(it->stride) - static_cast<long>(it->pad) + static_cast<long>(it->k) - 1;
  }
  return static_cast<std::size_t>(hi - lo + 1);
}

// Windows of a plain chain of layers (conv/pool only; pointwise layers skipped).
inline void collect_windows(const std::vector<sortnet::LayerSpec>& layers, std::vector<Window>& out) {
  for (const auto& l : layers) {
    if (l.kind == sortnet::LayerKind::Conv || l.kind == sortnet::LayerKind::Pool) out.push_back({l.k, l.stride, l.pad});
  }
}

class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 gen(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("sortnet_test_" + std::to_string(gen()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  return lines;
}

}  // namespace testing_support

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sortnet/error.hpp"
#include "sortnet/tape.hpp"
#include "sortnet/tensor.hpp"

namespace sortnet {

namespace faults {
#ifdef SORTNET_FAULT_INJECTION
// Test builds only: flips the sign of ew_mul's backward pass.
inline std::atomic<bool> mul_backward_sign_flip{false};
inline bool mul_backward_flipped() { return mul_backward_sign_flip.load(); }
#else
constexpr bool mul_backward_flipped() { return false; }
#endif
}  // namespace faults

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void accumulate(Tensor* sink, const Tensor& g) {
  if (sink == nullptr) return;
  auto dst = sink->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise ops
// ---------------------------------------------------------------------------

inline Var ew_add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "ew_add");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record("ew_add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t.grad_sink(a.id), g);
    detail::accumulate(t.grad_sink(b.id), g);
  });
}

inline Var ew_mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "ew_mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record("ew_mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const double sign = faults::mul_backward_flipped() ? -1.0 : 1.0;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += sign * g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_sink(b.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += sign * g[i] * av[i];
    }
  });
}

// Ties route the gradient to the first operand.
inline Var ew_max(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "ew_max");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  double margin = std::numeric_limits<double>::infinity();
  if (a.tape->track_kinks()) {
    for (std::size_t i = 0; i < out.size(); ++i) margin = std::min(margin, std::abs(av[i] - bv[i]));
  }
  Var r = a.tape->record("ew_max", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    Tensor* ga = t.grad_sink(a.id);
    Tensor* gb = t.grad_sink(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] >= bv[i]) {
        if (ga) (*ga)[i] += g[i];
      } else if (gb) {
        (*gb)[i] += g[i];
      }
    }
  });
  if (a.tape->track_kinks()) a.tape->note_kink_margin(r, margin);
  return r;
}

// Derivative at exactly 0 is 0.
inline Var relu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  double margin = std::numeric_limits<double>::infinity();
  if (a.tape->track_kinks()) {
    for (double v : av.data()) margin = std::min(margin, std::abs(v));
  }
  Var r = a.tape->record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > 0.0) (*ga)[i] += g[i];
      }
    }
  });
  if (a.tape->track_kinks()) a.tape->note_kink_margin(r, margin);
  return r;
}

/// out = sqrt(a + eps). Requires a >= 0 elementwise and eps > 0.
inline Var ew_sqrt_shift(Var a, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "ew_sqrt_shift: eps must be positive");
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] < 0.0) {
      throw Error(ErrorKind::NegativeInput, "ew_sqrt_shift: element " + std::to_string(i) + " is " +
                                                std::to_string(av[i]));
    }
    out[i] = std::sqrt(av[i] + eps);
  }
  return a.tape->record("ew_sqrt_shift", std::move(out), {a}, [a, eps](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / (2.0 * std::sqrt(av[i] + eps));
    }
  });
}

inline Var ew_square(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return a.tape->record("ew_square", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * av[i];
  return a.tape->record("scale", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += factor * g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record("sum", Tensor({1}, std::vector<double>{s}), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (auto& v : ga->data()) v += g[0];
    }
  });
}

/// Scalar sum(a * weights) with constant weights.
inline Var weighted_sum(Var a, const Tensor& weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  double s = 0.0;
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * weights[i];
  return a.tape->record("weighted_sum", Tensor({1}, std::vector<double>{s}), {a},
                        [a, weights](Tape& t, const Tensor& g) {
                          if (Tensor* ga = t.grad_sink(a.id)) {
                            for (std::size_t i = 0; i < weights.size(); ++i) (*ga)[i] += g[0] * weights[i];
                          }
                        });
}

inline Var flatten(Var a) {
  const Tensor& av = a.value();
  if (av.rank() < 2) throw Error(ErrorKind::ShapeMismatch, "flatten expects a batch axis");
  const std::size_t n = av.dim(0);
  Var out = a.tape->record("flatten", av.reshaped({n, av.size() / n}), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_plane() const { return out_h * out_w; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (stride == 0 || kernel > padded) return 0;
  return (padded - kernel) / stride + 1;
}

namespace detail {

inline void im2col(const double* img, const ConvGeometry& g, double* col) {
  const auto hw = static_cast<std::ptrdiff_t>(g.height);
  const auto ww = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* src = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= hw) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (x < 0 || x >= ww) ? 0.0 : src[y * ww + x];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* img) {
  const auto hw = static_cast<std::ptrdiff_t>(g.height);
  const auto ww = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* dst = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= hw) continue;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (x >= 0 && x < ww) dst[y * ww + x] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x[N,C,H,W] with w[K,C,kh,kw] plus optional bias[K],
/// zero padding on every side. Lowered to one GEMM per sample.
inline Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) throw Error(ErrorKind::ShapeMismatch, "conv2d expects 4-D input and kernel");
  if (xv.dim(1) != wv.dim(1)) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d: input has " + std::to_string(xv.dim(1)) +
                                              " channels, kernel expects " + std::to_string(wv.dim(1)));
  }
  if (b && (b->value().rank() != 1 || b->value().dim(0) != wv.dim(0))) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d: bias must have one entry per output channel");
  }
  if (stride == 0) throw Error(ErrorKind::InvalidGeometry, "conv2d: stride must be >= 1");
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3), stride, pad, 0, 0};
  g.out_h = conv_out_size(g.height, g.kernel_h, stride, pad);
  g.out_w = conv_out_size(g.width, g.kernel_w, stride, pad);
  if (g.out_h == 0 || g.out_w == 0) {
    throw Error(ErrorKind::InvalidGeometry, "conv2d: kernel " + shape_str(wv.shape()) + " does not fit input " +
                                                shape_str(xv.shape()) + " with pad " + std::to_string(pad));
  }

  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  std::vector<double> col(g.patch() * g.out_plane());
  detail::ConstMatrixMap wmat(wv.raw(), static_cast<Eigen::Index>(g.out_channels),
                              static_cast<Eigen::Index>(g.patch()));
  detail::ConstMatrixMap colmat(col.data(), static_cast<Eigen::Index>(g.patch()),
                                static_cast<Eigen::Index>(g.out_plane()));
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.out_plane();
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::im2col(xv.raw() + n * in_stride, g, col.data());
    detail::MatrixMap omat(out.raw() + n * out_stride, static_cast<Eigen::Index>(g.out_channels),
                           static_cast<Eigen::Index>(g.out_plane()));
    omat.noalias() = wmat * colmat;
    if (b) {
      const Tensor& bv = b->value();
      for (std::size_t k = 0; k < g.out_channels; ++k) omat.row(static_cast<Eigen::Index>(k)).array() += bv[k];
    }
  }

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  const std::optional<std::size_t> bias_id = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return x.tape->record("conv2d", std::move(out), inputs, [x, w, bias_id, g](Tape& t, const Tensor& gout) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    Tensor* gx = t.grad_sink(x.id);
    Tensor* gw = t.grad_sink(w.id);
    Tensor* gb = bias_id ? t.grad_sink(*bias_id) : nullptr;
    const auto rows = static_cast<Eigen::Index>(g.patch());
    const auto plane = static_cast<Eigen::Index>(g.out_plane());
    const auto kout = static_cast<Eigen::Index>(g.out_channels);
    std::vector<double> col(g.patch() * g.out_plane());
    detail::ConstMatrixMap colmat(col.data(), rows, plane);
    detail::ConstMatrixMap wmat(wv.raw(), kout, rows);
    const std::size_t in_stride = g.in_channels * g.height * g.width;
    const std::size_t out_stride = g.out_channels * g.out_plane();
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::ConstMatrixMap gmat(gout.raw() + n * out_stride, kout, plane);
      if (gw) {
        detail::im2col(xv.raw() + n * in_stride, g, col.data());
        detail::MatrixMap gwmat(gw->raw(), kout, rows);
        gwmat.noalias() += gmat * colmat.transpose();
      }
      if (gb) {
        for (Eigen::Index k = 0; k < kout; ++k) (*gb)[static_cast<std::size_t>(k)] += gmat.row(k).sum();
      }
      if (gx) {
        detail::MatrixMap dcol(col.data(), rows, plane);
        dcol.noalias() = wmat.transpose() * gmat;
        detail::col2im_add(col.data(), g, gx->raw() + n * in_stride);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling without padding; ties route to the first position scanned.
inline Var maxpool2d(Var x, std::size_t kernel, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw Error(ErrorKind::ShapeMismatch, "maxpool2d expects a 4-D input");
  if (kernel == 0 || stride == 0) throw Error(ErrorKind::InvalidGeometry, "maxpool2d: kernel and stride must be >= 1");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = conv_out_size(h, kernel, stride, 0);
  const std::size_t ow = conv_out_size(w, kernel, stride, 0);
  if (oh == 0 || ow == 0) throw Error(ErrorKind::InvalidGeometry, "maxpool2d: window larger than input");
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const bool track = x.tape->track_kinks();
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xv.raw() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        if (track) {
          // Distance from the runner-up in the window: a tie is a kink.
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
              if (idx != best) margin = std::min(margin, src[best] - src[idx]);
            }
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
    }
  }
  Var r = x.tape->record("maxpool2d", std::move(out), {x}, [x, argmax](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x.id)) {
      for (std::size_t o = 0; o < g.size(); ++o) (*gx)[argmax[o]] += g[o];
    }
  });
  if (track) x.tape->note_kink_margin(r, margin);
  return r;
}

/// [N,C,H,W] -> [N,C] spatial mean.
inline Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw Error(ErrorKind::ShapeMismatch, "global_avg_pool expects a 4-D input");
  const std::size_t planes = xv.dim(0) * xv.dim(1);
  const std::size_t area = xv.dim(2) * xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += xv[p * area + i];
    out[p] = s / static_cast<double>(area);
  }
  return x.tape->record("global_avg_pool", std::move(out), {x}, [x, planes, area](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x.id)) {
      const double inv = 1.0 / static_cast<double>(area);
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < area; ++i) (*gx)[p * area + i] += g[p] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// x[N,D] * w[O,D]^T + b[O].
inline Var fc(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    throw Error(ErrorKind::ShapeMismatch, "fc expects x[N,D], w[O,D], b[O]");
  }
  if (xv.dim(1) != wv.dim(1) || bv.dim(0) != wv.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "fc: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()) +
                                              ", b " + shape_str(bv.shape()));
  }
  const auto n = static_cast<Eigen::Index>(xv.dim(0));
  const auto d = static_cast<Eigen::Index>(xv.dim(1));
  const auto o = static_cast<Eigen::Index>(wv.dim(0));
  Tensor out({xv.dim(0), wv.dim(0)});
  detail::MatrixMap omat(out.raw(), n, o);
  omat.noalias() = detail::ConstMatrixMap(xv.raw(), n, d) * detail::ConstMatrixMap(wv.raw(), o, d).transpose();
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index k = 0; k < o; ++k) omat(r, k) += bv[static_cast<std::size_t>(k)];
  }
  return x.tape->record("fc", std::move(out), {x, w, b}, [x, w, b, n, d, o](Tape& t, const Tensor& g) {
    detail::ConstMatrixMap gmat(g.raw(), n, o);
    if (Tensor* gx = t.grad_sink(x.id)) {
      detail::MatrixMap(gx->raw(), n, d).noalias() += gmat * detail::ConstMatrixMap(t.value(w).raw(), o, d);
    }
    if (Tensor* gw = t.grad_sink(w.id)) {
      detail::MatrixMap(gw->raw(), o, d).noalias() +=
          gmat.transpose() * detail::ConstMatrixMap(t.value(x).raw(), n, d);
    }
    if (Tensor* gb = t.grad_sink(b.id)) {
      for (Eigen::Index k = 0; k < o; ++k) (*gb)[static_cast<std::size_t>(k)] += gmat.col(k).sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels ? Tensor::zeros({channels}) : Tensor()),
        running_var(channels ? Tensor::ones({channels}) : Tensor()) {}

  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Normalizes over every axis except 1 (channels). Train mode uses batch
/// statistics and updates the running estimates; eval mode uses the running
/// estimates.
inline Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 4) throw Error(ErrorKind::ShapeMismatch, "batchnorm expects 2-D or 4-D input");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  if (gamma.value().size() != c || beta.value().size() != c || state.running_mean.size() != c) {
    throw Error(ErrorKind::ShapeMismatch, "batchnorm: parameter size does not match channel count");
  }
  const double count = static_cast<double>(n * inner);
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (mode == Mode::Train) {
    if (n * inner < 2) throw Error(ErrorKind::InvalidGeometry, "batchnorm: train mode needs at least 2 values");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xv.raw() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double m = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xv.raw() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / count;
      mean[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
      state.running_mean[ch] = state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * m;
      state.running_var[ch] =
          state.momentum * state.running_var[ch] + (1.0 - state.momentum) * ss / (count - 1.0);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    }
  }

  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (xv[base + i] - mean[ch]) * inv_std[ch];
        xhat[base + i] = h;
        out[base + i] = gv[ch] * h + bv[ch];
      }
    }
  }

  const bool train = mode == Mode::Train;
  return x.tape->record(
      "batchnorm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, n, c, inner, count, train](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gamma);
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_g[ch] += g[base + i];
              sum_gx[ch] += g[base + i] * xhat[base + i];
            }
          }
        }
        if (Tensor* gg = t.grad_sink(gamma.id)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gg)[ch] += sum_gx[ch];
        }
        if (Tensor* gb = t.grad_sink(beta.id)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gb)[ch] += sum_g[ch];
        }
        if (Tensor* gx = t.grad_sink(x.id)) {
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * inner;
              const double k = gv[ch] * inv_std[ch];
              for (std::size_t i = 0; i < inner; ++i) {
                if (train) {
                  (*gx)[base + i] += k * (g[base + i] - sum_g[ch] / count - xhat[base + i] * sum_gx[ch] / count);
                } else {
                  (*gx)[base + i] += k * g[base + i];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct XentResult {
  Var loss;                    // mean cross-entropy, shape [1]
  std::vector<int> predicted;  // argmax per row
};

inline XentResult softmax_xent(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "softmax_xent expects logits[N,C]");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  if (labels.size() != n) {
    throw Error(ErrorKind::ShapeMismatch, "softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                                              std::to_string(n) + " rows");
  }
  Tensor probs({n, c});
  // d loss / d logit[label] = p[label] - 1; kept apart to avoid cancellation.
  std::vector<double> label_grad(n);
  std::vector<int> predicted(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(label) + " outside [0," +
                                                  std::to_string(c) + ")");
    }
    const double* row = lv.raw() + r * c;
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (row[k] > row[best]) best = k;
    }
    predicted[r] = static_cast<int>(best);
    const double m = row[best];
    // log1p keeps full relative precision when the softmax is saturated.
    double rest = 0.0;
    for (std::size_t k = 0; k < c; ++k) rest += k == best ? 0.0 : std::exp(row[k] - m);
    const double z = 1.0 + rest;
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(row[k] - m) / z;
    total += (m - row[label]) + std::log1p(rest);
    label_grad[r] = static_cast<std::size_t>(label) == best ? -rest / z : probs[r * c + label] - 1.0;
  }
  std::vector<int> owned(labels.begin(), labels.end());
  Var loss = logits.tape->record(
      "softmax_xent", Tensor({1}, std::vector<double>{total / static_cast<double>(n)}), {logits},
      [logits, probs = std::move(probs), label_grad = std::move(label_grad), owned, n, c](Tape& t,
                                                                                         const Tensor& g) {
        if (Tensor* gl = t.grad_sink(logits.id)) {
          const double k = g[0] / static_cast<double>(n);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
              const double d = static_cast<int>(j) == owned[r] ? label_grad[r] : probs[r * c + j];
              (*gl)[r * c + j] += k * d;
            }
          }
        }
      });
  return {loss, std::move(predicted)};
}

}  // namespace sortnet

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sortnet/error.hpp"
#include "sortnet/ops.hpp"
#include "sortnet/tape.hpp"

namespace sortnet {

enum class ProductWrapper { Identity, SqrtEps };
enum class ProductGate { None, ReluBoth };
// SelfSquare replaces F1*F2 by F1*F1. It exists only as a negative control:
// it has no cross-branch gradient path.
enum class ProductForm { Cross, SelfSquare };

/// Selects which fusion terms are summed: F1+F2, max(F1,F2) and
/// g[gate(F1)*gate(F2)].
struct FusionSpec {
  bool use_sum = true;
  bool use_max = false;
  bool use_prod = false;
  ProductWrapper prod_wrapper = ProductWrapper::Identity;
  double eps = 1e-4;
  ProductGate prod_input_gate = ProductGate::None;
  ProductForm prod_form = ProductForm::Cross;

  static FusionSpec linear() { return {}; }

  static FusionSpec maxout() {
    FusionSpec s;
    s.use_sum = false;
    s.use_max = true;
    return s;
  }

  // F1 + F2 + F1*F2, the branched chain-network form.
  static FusionSpec sort_branched() {
    FusionSpec s;
    s.use_prod = true;
    return s;
  }

  // x + F(x) + sqrt(relu(x)*relu(F(x)) + eps), the residual form.
  static FusionSpec residual_sort(double eps = 1e-4) {
    FusionSpec s;
    s.use_prod = true;
    s.prod_wrapper = ProductWrapper::SqrtEps;
    s.eps = eps;
    s.prod_input_gate = ProductGate::ReluBoth;
    return s;
  }

  void validate() const {
    if (!use_sum && !use_max && !use_prod) throw Error(ErrorKind::EmptySpec, "fusion spec has no active term");
    if (prod_wrapper == ProductWrapper::SqrtEps && !(eps > 0.0)) {
      throw Error(ErrorKind::InvalidConfig, "sqrt wrapper requires eps > 0");
    }
  }

  // Term set only, e.g. "sum+prod".
  std::string terms() const {
    std::string s;
    auto add = [&s](const char* t) { s += s.empty() ? t : std::string("+") + t; };
    if (use_sum) add("sum");
    if (use_max) add("max");
    if (use_prod) add("prod");
    return s.empty() ? "none" : s;
  }

  // Parses a term set such as "sum+prod"; product settings are kept.
  FusionSpec with_terms(const std::string& text) const {
    FusionSpec s = *this;
    s.use_sum = s.use_max = s.use_prod = false;
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t end = std::min(text.find('+', start), text.size());
      const std::string tok = text.substr(start, end - start);
      if (tok == "sum") {
        s.use_sum = true;
      } else if (tok == "max") {
        s.use_max = true;
      } else if (tok == "prod") {
        s.use_prod = true;
      } else {
        throw Error(ErrorKind::InvalidConfig, "unknown fusion term '" + tok + "'");
      }
      start = end + 1;
    }
    s.validate();
    return s;
  }

  friend bool operator==(const FusionSpec&, const FusionSpec&) = default;
};

/// The seven non-empty subsets of {sum, max, prod}, in ablation-table order:
/// {+}, {max}, {prod}, {+,max}, {+,prod}, {max,prod}, {+,max,prod}.
inline std::array<FusionSpec, 7> ablation_rows(const FusionSpec& product_settings) {
  constexpr std::array<std::array<bool, 3>, 7> masks{{{true, false, false},
                                                      {false, true, false},
                                                      {false, false, true},
                                                      {true, true, false},
                                                      {true, false, true},
                                                      {false, true, true},
                                                      {true, true, true}}};
  std::array<FusionSpec, 7> rows{};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    rows[r] = product_settings;
    rows[r].use_sum = masks[r][0];
    rows[r].use_max = masks[r][1];
    rows[r].use_prod = masks[r][2];
  }
  return rows;
}

/// Two-branch fusion as a single tape node. A {sum} spec is bitwise
/// identical to ew_add and a {max} spec to ew_max.
inline Var sort_fuse(Var f1, Var f2, const FusionSpec& spec) {
  spec.validate();
  const Tensor& av = f1.value();
  const Tensor& bv = f2.value();
  require_same_shape(av, bv, "sort_fuse");
  const bool gated = spec.prod_input_gate == ProductGate::ReluBoth;
  const bool wrapped = spec.prod_wrapper == ProductWrapper::SqrtEps;
  const bool square = spec.prod_form == ProductForm::SelfSquare;
  const double eps = spec.eps;

  const bool track = f1.tape->track_kinks();
  double margin = std::numeric_limits<double>::infinity();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = av[i];
    const double b = bv[i];
    if (track) {
      if (spec.use_max) margin = std::min(margin, std::abs(a - b));
      if (spec.use_prod && gated) margin = std::min({margin, std::abs(a), std::abs(b)});
    }
    std::optional<double> acc;
    auto push = [&acc](double term) { acc = acc ? *acc + term : term; };
    if (spec.use_sum) push(a + b);
    if (spec.use_max) push(a >= b ? a : b);
    if (spec.use_prod) {
      if (wrapped && !gated && (a < 0.0 || b < 0.0)) {
        throw Error(ErrorKind::NegativeInput, "sort_fuse: sqrt-wrapped product needs non-negative branches, got (" +
                                                  std::to_string(a) + ", " + std::to_string(b) + ")");
      }
      const double ga = gated && a < 0.0 ? 0.0 : a;
      const double gb = square ? ga : (gated && b < 0.0 ? 0.0 : b);
      const double p = ga * gb;
      push(wrapped ? std::sqrt(p + eps) : p);
    }
    out[i] = *acc;
  }

  Var fused = f1.tape->record("sort_fuse", std::move(out), {f1, f2}, [f1, f2, spec, gated, wrapped, square](
                                                                     Tape& t, const Tensor& g) {
    const Tensor& av = t.value(f1);
    const Tensor& bv = t.value(f2);
    Tensor* g1 = t.grad_sink(f1.id);
    Tensor* g2 = t.grad_sink(f2.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double a = av[i];
      const double b = bv[i];
      double da = 0.0;
      double db = 0.0;
      if (spec.use_sum) {
        da = 1.0;
        db = 1.0;
      }
      if (spec.use_max) {
        if (a >= b) {
          da += 1.0;
        } else {
          db += 1.0;
        }
      }
      if (spec.use_prod) {
        const double ga = gated && a < 0.0 ? 0.0 : a;
        const double pass_a = gated ? (a > 0.0 ? 1.0 : 0.0) : 1.0;
        const double pass_b = gated ? (b > 0.0 ? 1.0 : 0.0) : 1.0;
        if (square) {
          const double outer = wrapped ? 1.0 / (2.0 * std::sqrt(ga * ga + spec.eps)) : 1.0;
          da += wrapped ? 2.0 * ga * pass_a * outer : 2.0 * ga * pass_a;
        } else {
          const double gb = gated && b < 0.0 ? 0.0 : b;
          if (wrapped) {
            const double outer = 1.0 / (2.0 * std::sqrt(ga * gb + spec.eps));
            da += gb * pass_a * outer;
            db += ga * pass_b * outer;
          } else {
            da += gb * pass_a;
            db += ga * pass_b;
          }
        }
      }
      if (g1) (*g1)[i] += g[i] * da;
      if (g2) (*g2)[i] += g[i] * db;
    }
  });
  if (track) f1.tape->note_kink_margin(fused, margin);
  return fused;
}

struct ResidualFuseParams {
  double eps = 1e-4;
};

/// x + F(x) + sqrt(relu(x)*relu(F(x)) + eps). Inputs may be negative.
inline Var residual_sort_fuse(Var x, Var fx, ResidualFuseParams p = {}) {
  if (!(p.eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "residual_sort_fuse: eps must be positive");
  return sort_fuse(x, fx, FusionSpec::residual_sort(p.eps));
}

// ---------------------------------------------------------------------------
// Response surfaces of the first- and second-order transforms
// ---------------------------------------------------------------------------

enum class SurfaceKind { LinearRelu, SecondOrder };

struct GridSpec {
  double lo = -2.0;
  double hi = 2.0;
  double step = 0.05;

  // Points are lo + (hi-lo)*i/(n-1) so the endpoints and a symmetric
  // midpoint are hit exactly.
  std::vector<double> points() const {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !std::isfinite(step) || !(step > 0.0) || hi < lo) {
      throw Error(ErrorKind::EmptyGrid, "grid [" + std::to_string(lo) + ", " + std::to_string(hi) + "] step " +
                                            std::to_string(step) + " has no points");
    }
    const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
    std::vector<double> pts(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
      pts[i] = lo * (1.0 - t) + hi * t;
    }
    return pts;
  }
};

struct SurfacePoint {
  double x, y, value;
};

/// f1(x,y) = x* + y*; f2(x,y) = x* + y* + x* y*, with v* = max(v, 0).
inline double surface_value(SurfaceKind kind, double x, double y) {
  const double xs = std::max(x, 0.0);
  const double ys = std::max(y, 0.0);
  return kind == SurfaceKind::LinearRelu ? xs + ys : xs + ys + xs * ys;
}

inline std::vector<SurfacePoint> nonlinearity_surface(SurfaceKind kind, const GridSpec& grid) {
  const auto pts = grid.points();
  std::vector<SurfacePoint> out;
  out.reserve(pts.size() * pts.size());
  for (double x : pts) {
    for (double y : pts) out.push_back({x, y, surface_value(kind, x, y)});
  }
  return out;
}

inline void write_surface_csv(std::ostream& os, const std::vector<SurfacePoint>& points) {
  os << "x,y,value\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.6g\n", p.x, p.y, p.value);
    os << buf;
  }
}

inline void write_surface_csv(const std::string& path, const std::vector<SurfacePoint>& points) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  write_surface_csv(os, points);
  if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

}  // namespace sortnet

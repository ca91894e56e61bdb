#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sortnet/error.hpp"
#include "sortnet/tape.hpp"

namespace sortnet {

/// Records a scalar function of the given params on the supplied tape.
using ScalarFn = std::function<Var(Tape&)>;

struct ParamCheck {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = true;
};

/// Relative error between two gradient tensors, measured against the larger
/// of their max-norms. Gradients below 1e-10 in both tensors count as zero.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  require_same_shape(analytic, numeric, "relative_error");
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  const double scale = std::max({max_abs(analytic), max_abs(numeric), 1e-10});
  return diff / scale;
}

namespace detail {
inline double eval_scalar(const ScalarFn& f) {
  Tape tape(false);
  const double v = f(tape).value()[0];
  if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteLoss, "grad_check: function returned " + std::to_string(v));
  return v;
}
}  // namespace detail

/// Compares tape gradients against central differences
/// (f(p+h) - f(p-h)) / 2h, one element at a time.
inline GradCheckReport grad_check(const ScalarFn& f, std::span<Param* const> params, double h = 1e-5,
                                  double tol = 1e-5) {
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidConfig, "grad_check: h must be positive");
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    if (loss.value().size() != 1) throw Error(ErrorKind::ShapeMismatch, "grad_check: function must be scalar");
    if (!std::isfinite(loss.value()[0])) {
      throw Error(ErrorKind::NonFiniteLoss, "grad_check: function returned " + std::to_string(loss.value()[0]));
    }
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tol = tol;
  for (Param* p : params) {
    Tensor numeric(p->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = detail::eval_scalar(f);
      p->value[i] = orig - h;
      const double down = detail::eval_scalar(f);
      p->value[i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    const double err = relative_error(p->grad, numeric);
    report.params.push_back({p->name, err});
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

inline GradCheckReport grad_check(const ScalarFn& f, std::vector<Param*> params, double h = 1e-5,
                                  double tol = 1e-5) {
  return grad_check(f, std::span<Param* const>(params), h, tol);
}

}  // namespace sortnet

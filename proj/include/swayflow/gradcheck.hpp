#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool nonfinite = false;  // a non-finite value appeared and is reported, not swallowed
  bool pass = false;
  std::string note;
};

// Compares reverse-mode gradients of a scalar-valued function against
// central finite differences at `point`. Relative error uses a unit floor
// so near-zero gradients are compared absolutely. 64-bit only: the
// finite-difference oracle is meaningless at float precision.
template <class F>
GradCheckReport grad_check(F&& f, const Tensor<double>& point, double step = 1e-5,
                           double tolerance = 1e-4) {
  GradCheckReport rep;
  const int64_t n = point.numel();

  Tensor<double> x(point.shape(), point.data());
  x.set_requires_grad(true);
  std::vector<double> analytic(static_cast<std::size_t>(n), 0.0);
  {
    Graph<double> graph;
    Tensor<double> y = f(x);
    if (y.numel() != 1)
      fail("grad_check: function must be scalar-valued, got shape ", shape_str(y.shape()));
    if (!std::isfinite(y.item())) {
      rep.nonfinite = true;
      rep.note = "non-finite function value at the evaluation point";
      return rep;
    }
    graph.backward(y);
    if (x.has_grad()) analytic = x.grad();
  }
  if (!all_finite(analytic)) {
    rep.nonfinite = true;
    rep.note = "non-finite analytic gradient";
    return rep;
  }

  for (int64_t i = 0; i < n; ++i) {
    double fd[2];
    for (int s = 0; s < 2; ++s) {
      Tensor<double> p(point.shape(), point.data());
      p.mutable_data()[i] += (s == 0 ? step : -step);
      const double v = f(p).item();
      if (!std::isfinite(v)) {
        rep.nonfinite = true;
        rep.note = detail::msg("non-finite value when perturbing element ", i);
        return rep;
      }
      fd[s] = v;
    }
    const double numeric = (fd[0] - fd[1]) / (2.0 * step);
    const double denom =
        std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = analytic[i];
      rep.numeric_at_worst = numeric;
    }
  }
  rep.pass = !rep.nonfinite && rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace swayflow

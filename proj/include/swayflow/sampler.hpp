#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/ops.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {

enum class Solver { euler, midpoint, heun3 };

inline const char* solver_name(Solver s) {
  switch (s) {
    case Solver::euler: return "euler";
    case Solver::midpoint: return "midpoint";
    case Solver::heun3: return "heun3";
  }
  return "?";
}

inline Solver solver_from_name(const std::string& name) {
  if (name == "euler") return Solver::euler;
  if (name == "midpoint") return Solver::midpoint;
  if (name == "heun3") return Solver::heun3;
  fail("unknown solver '", name, "' (valid: euler, midpoint, heun3)");
}

// Vector-field evaluations needed to advance one segment.
inline int64_t evals_per_segment(Solver s) {
  switch (s) {
    case Solver::euler: return 1;
    case Solver::midpoint: return 2;
    case Solver::heun3: return 3;
  }
  return 0;
}

// Largest coefficient for which the schedule warp stays monotone.
inline double sway_coefficient_max() { return 2.0 / (kPi - 2.0); }

inline void check_sway_coefficient(double s) {
  if (!(s >= -1.0 && s <= sway_coefficient_max()))
    fail("sway coefficient ", s, " outside [-1, ", sway_coefficient_max(), "]");
}

// Warps a uniform schedule position: u + s * (cos(pi*u/2) - 1 + u).
// Fixes 0 and 1; s < 0 concentrates flow steps toward t = 0, s > 0 toward
// t = 1, s = 0 is the identity.
inline double sway_sample(double u, double s) {
  check_sway_coefficient(s);
  if (!(u >= 0.0 && u <= 1.0)) fail("sway_sample: u = ", u, " outside [0, 1]");
  if (u == 0.0) return 0.0;
  if (u == 1.0) return 1.0;
  const double t = u + s * (std::cos(kPi * 0.5 * u) - 1.0 + u);
  return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
}

// Inverse of the warp by bisection; doubles as the analytic CDF of warped
// uniform samples (P(f(U) <= t) = f^{-1}(t)).
inline double sway_inverse(double t, double s) {
  check_sway_coefficient(s);
  if (!(t >= 0.0 && t <= 1.0)) fail("sway_inverse: t = ", t, " outside [0, 1]");
  double lo = 0.0, hi = 1.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (sway_sample(mid, s) < t)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Ordered flow steps plus the solver/guidance settings used to walk them.
struct FlowSchedule {
  std::vector<double> steps;  // segment boundaries, strictly increasing
  Solver solver = Solver::euler;
  double cfg_alpha = 0.0;
  double sway = 0.0;
  int64_t declared_nfe = 0;

  int64_t segments() const { return static_cast<int64_t>(steps.size()) - 1; }
};

// `nfe` counts vector-field passes before the guidance factor; it must be a
// multiple of the solver's per-segment evaluation count.
inline FlowSchedule build_schedule(int64_t nfe, double s, Solver solver, double cfg_alpha) {
  if (nfe <= 0) fail("build_schedule: nfe must be positive, got ", nfe);
  const int64_t per_seg = evals_per_segment(solver);
  if (nfe % per_seg != 0)
    fail("build_schedule: nfe ", nfe, " must be a multiple of ", per_seg, " for ",
         solver_name(solver));
  check_sway_coefficient(s);
  if (cfg_alpha < 0.0) fail("build_schedule: cfg_alpha must be >= 0, got ", cfg_alpha);
  const int64_t segments = nfe / per_seg;
  FlowSchedule sched;
  sched.solver = solver;
  sched.cfg_alpha = cfg_alpha;
  sched.sway = s;
  sched.declared_nfe = nfe;
  sched.steps.resize(static_cast<std::size_t>(segments) + 1);
  for (int64_t i = 0; i <= segments; ++i)
    sched.steps[i] = sway_sample(static_cast<double>(i) / static_cast<double>(segments), s);
  for (int64_t i = 0; i < segments; ++i)
    if (!(sched.steps[i] < sched.steps[i + 1]))
      fail("build_schedule: steps are not strictly increasing at index ", i);
  return sched;
}

// Total vector-field forward passes the schedule will perform, including
// the doubling from classifier-free guidance.
inline int64_t nfe_count(const FlowSchedule& sched) {
  const int64_t base = sched.segments() * evals_per_segment(sched.solver);
  return sched.cfg_alpha > 0.0 ? 2 * base : base;
}

// Guided combination: v_cond + alpha * (v_cond - v_uncond). alpha = 0
// returns the conditional field bit-identically.
template <class S>
Tensor<S> cfg_combine(const Tensor<S>& v_cond, const Tensor<S>& v_uncond, double alpha) {
  if (alpha < 0.0) fail("cfg_combine: alpha must be >= 0, got ", alpha);
  if (alpha == 0.0) return v_cond;
  detail::check_same_shape("cfg_combine", v_cond, v_uncond);
  return add(v_cond, mul_scalar(sub(v_cond, v_uncond), alpha));
}

// Conditional / unconditional evaluator pair. The unconditional branch is
// only consulted when the schedule carries guidance.
template <class S>
struct VectorField {
  std::function<Tensor<S>(const Tensor<S>&, double)> conditional;
  std::function<Tensor<S>(const Tensor<S>&, double)> unconditional;
};

template <class S>
struct IntegrateResult {
  Tensor<S> state;
  int64_t evals = 0;  // realized vector-field passes, guidance included
};

// Fixed-step integration of dx/dt = v(x, t) over the schedule's steps.
template <class S>
IntegrateResult<S> integrate(const VectorField<S>& vf, const Tensor<S>& x0,
                             const FlowSchedule& sched) {
  if (!vf.conditional) fail("integrate: conditional field is not set");
  if (sched.cfg_alpha > 0.0 && !vf.unconditional)
    fail("integrate: cfg_alpha > 0 requires an unconditional field");
  if (sched.steps.size() < 1) fail("integrate: empty schedule");
  IntegrateResult<S> res{x0, 0};

  auto eval = [&](const Tensor<S>& state, double t) {
    Tensor<S> v = vf.conditional(state, t);
    ++res.evals;
    detail::check_same_shape("integrate: vector field output", v, state);
    if (sched.cfg_alpha > 0.0) {
      Tensor<S> u = vf.unconditional(state, t);
      ++res.evals;
      v = cfg_combine(v, u, sched.cfg_alpha);
    }
    return v;
  };

  for (int64_t i = 0; i + 1 < static_cast<int64_t>(sched.steps.size()); ++i) {
    const double t0 = sched.steps[i];
    const double h = sched.steps[i + 1] - t0;
    Tensor<S>& x = res.state;
    switch (sched.solver) {
      case Solver::euler: {
        x = add(x, mul_scalar(eval(x, t0), h));
        break;
      }
      case Solver::midpoint: {
        auto k1 = eval(x, t0);
        auto xm = add(x, mul_scalar(k1, 0.5 * h));
        x = add(x, mul_scalar(eval(xm, t0 + 0.5 * h), h));
        break;
      }
      case Solver::heun3: {
        auto k1 = eval(x, t0);
        auto x2 = add(x, mul_scalar(k1, h / 3.0));
        auto k2 = eval(x2, t0 + h / 3.0);
        auto x3 = add(x, mul_scalar(k2, 2.0 * h / 3.0));
        auto k3 = eval(x3, t0 + 2.0 * h / 3.0);
        x = add(x, mul_scalar(add(k1, mul_scalar(k3, 3.0)), 0.25 * h));
        break;
      }
    }
    if (!all_finite(res.state.data()))
      fail("integrate: non-finite state after step ", i, " (t = ", sched.steps[i + 1], ")");
  }
  return res;
}

// Starts integration from a mix of noise and a leaked reference signal: the
// walk begins exactly at t_prime from (1 - t_prime) * x0 + t_prime * x_leak
// and runs the full schedule compressed onto the remaining window, node i
// landing at t_prime + (1 - t_prime) * steps[i]. The step budget and the
// schedule's density profile are both preserved, only rescaled.
template <class S>
IntegrateResult<S> leak_and_override(const VectorField<S>& vf, const Tensor<S>& x0,
                                     const Tensor<S>& x_leak, double t_prime,
                                     const FlowSchedule& sched) {
  detail::check_same_shape("leak_and_override", x0, x_leak);
  if (sched.steps.size() < 2) fail("leak_and_override: schedule has no segments");
  if (!(t_prime >= 0.0) || t_prime >= sched.steps.back())
    fail("leak_and_override: t_prime = ", t_prime,
         " must lie in [0, last schedule step = ", sched.steps.back(), ")");
  auto start = add(mul_scalar(x0, 1.0 - t_prime), mul_scalar(x_leak, t_prime));
  FlowSchedule window = sched;
  for (double& t : window.steps) t = t_prime + (1.0 - t_prime) * t;
  return integrate(vf, start, window);
}

}  // namespace swayflow

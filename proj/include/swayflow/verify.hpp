#pragma once

// Self-diagnostic check suites. Every check measures one quantity and
// compares it against a fixed bound; results print as one line each so a
// harness can parse them. Suites are pure functions of their seeds except
// where a scratch directory is needed for file round-trips.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "swayflow/cfm.hpp"
#include "swayflow/checkpoint.hpp"
#include "swayflow/common.hpp"
#include "swayflow/corpus.hpp"
#include "swayflow/gradcheck.hpp"
#include "swayflow/model.hpp"
#include "swayflow/ops.hpp"
#include "swayflow/pipeline.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/sampler.hpp"
#include "swayflow/stats.hpp"
#include "swayflow/training.hpp"

namespace swayflow {

struct CheckResult {
  std::string name;
  double value = 0.0;
  std::string bound;  // human-readable comparison the verdict was made against
  bool pass = false;
};

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string format_check(const CheckResult& c) {
  return "check " + c.name + " value=" + format_value(c.value) + " bound=" + c.bound +
         " verdict=" + (c.pass ? "PASS" : "FAIL");
}

// Prints one line per check; returns the number of failures.
inline int print_checks(const std::vector<CheckResult>& checks, std::ostream& os) {
  int failures = 0;
  for (const auto& c : checks) {
    os << format_check(c) << '\n';
    if (!c.pass) ++failures;
  }
  return failures;
}

inline bool all_pass(const std::vector<CheckResult>& checks) {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

inline void append_checks(std::vector<CheckResult>& into, std::vector<CheckResult> more) {
  for (auto& c : more) into.push_back(std::move(c));
}

namespace detail {

inline CheckResult check_lt(std::string name, double value, double bound) {
  return {std::move(name), value, "<" + format_value(bound), value < bound};
}

inline CheckResult check_le(std::string name, double value, double bound) {
  return {std::move(name), value, "<=" + format_value(bound), value <= bound};
}

inline CheckResult check_ge(std::string name, double value, double bound) {
  return {std::move(name), value, ">=" + format_value(bound), value >= bound};
}

inline CheckResult check_gt(std::string name, double value, double bound) {
  return {std::move(name), value, ">" + format_value(bound), value > bound};
}

inline CheckResult check_eq(std::string name, double value, double bound) {
  return {std::move(name), value, "==" + format_value(bound), value == bound};
}

inline CheckResult check_within(std::string name, double value, double center, double radius) {
  return {std::move(name), value, format_value(center) + "+-" + format_value(radius),
          std::abs(value - center) <= radius};
}

inline double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// --- flow-step schedule distribution -------------------------------------

// Draws `n` uniform variates per coefficient, maps them through the schedule
// warp, and compares the empirical distribution against the analytic CDF
// (the warp's inverse). Also checks the direction each coefficient pushes
// the median: negative coefficients pack steps near 0, positive near 1.
inline std::vector<CheckResult> check_sway_distribution(int64_t n = 1'000'000,
                                                        uint64_t seed = 1001) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> out;
  Rng rng(seed);
  for (double s : {-1.0, -0.5, 0.0, 1.0}) {
    std::vector<double> mapped(static_cast<std::size_t>(n));
    for (auto& t : mapped) t = sway_sample(rng.uniform(), s);
    const double d = ks_statistic(mapped, [s](double t) { return sway_inverse(t, s); });
    const std::string tag = "s=" + format_value(s);
    out.push_back(detail::check_lt("sway.ks." + tag, d, 0.002));
    const double med = median_of(mapped);
    if (s < 0.0)
      out.push_back(detail::check_lt("sway.median." + tag, med, 0.5));
    else if (s > 0.0)
      out.push_back(detail::check_gt("sway.median." + tag, med, 0.5));
    else
      out.push_back(detail::check_within("sway.median." + tag, med, 0.5, 0.005));
  }
  out.push_back(detail::check_lt("sway.runtime_seconds", detail::seconds_since(t0), 10.0));
  return out;
}

// Endpoint pinning, monotonicity, and domain rejection of the schedule warp.
inline std::vector<CheckResult> check_sway_shape(uint64_t seed = 1002) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> out;
  Rng rng(seed);

  double endpoint_dev = 0.0;
  std::vector<double> coeffs{-1.0, sway_coefficient_max()};
  for (int i = 0; i < 18; ++i)
    coeffs.push_back(-1.0 + rng.uniform() * (1.0 + sway_coefficient_max()));
  for (double s : coeffs) {
    endpoint_dev = std::max(endpoint_dev, std::abs(sway_sample(0.0, s)));
    endpoint_dev = std::max(endpoint_dev, std::abs(sway_sample(1.0, s) - 1.0));
  }
  out.push_back(detail::check_eq("sway.endpoint_deviation", endpoint_dev, 0.0));

  int64_t violations = 0;
  for (double s : coeffs) {
    for (int i = 0; i < 10'000; ++i) {
      double a = rng.uniform(), b = rng.uniform();
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      if (!(sway_sample(a, s) < sway_sample(b, s))) ++violations;
    }
  }
  out.push_back(detail::check_eq("sway.monotonicity_violations",
                                 static_cast<double>(violations), 0.0));

  int64_t rejected = 0;
  for (double s : {-1.0001, sway_coefficient_max() + 1e-6}) {
    try {
      sway_sample(0.5, s);
    } catch (const Error&) {
      ++rejected;
    }
  }
  out.push_back(detail::check_eq("sway.out_of_range_rejections",
                                 static_cast<double>(rejected), 2.0));
  out.push_back(detail::check_lt("sway.shape_runtime_seconds", detail::seconds_since(t0), 1.0));
  return out;
}

// --- solver convergence ---------------------------------------------------

namespace detail {

inline VectorField<double> exponential_growth_field(int* uncond_calls = nullptr) {
  VectorField<double> vf;
  vf.conditional = [](const Tensor<double>& x, double) { return x; };
  vf.unconditional = [uncond_calls](const Tensor<double>& x, double) {
    if (uncond_calls) ++(*uncond_calls);
    return mul_scalar(x, 0.5);
  };
  return vf;
}

inline double integrate_exponential(Solver solver, int64_t segments, double sway) {
  auto vf = exponential_growth_field();
  auto sched = build_schedule(segments * evals_per_segment(solver), sway, solver, 0.0);
  return integrate(vf, Tensor<double>::scalar(1.0), sched).state.item();
}

}  // namespace detail

// Empirical convergence order of each solver on dx/dt = x over [0, 1],
// measured as the log-log slope of error against segment count, plus the
// binary-exact four-segment Euler value.
inline std::vector<CheckResult> check_solver_orders() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> out;
  const struct {
    Solver solver;
    double order;
  } cases[] = {{Solver::euler, 1.0}, {Solver::midpoint, 2.0}, {Solver::heun3, 3.0}};
  for (const auto& c : cases) {
    std::vector<double> log_n, log_err;
    for (int64_t segs : {4, 8, 16, 32, 64}) {
      const double err = std::abs(detail::integrate_exponential(c.solver, segs, 0.0) -
                                  std::exp(1.0));
      log_n.push_back(std::log2(static_cast<double>(segs)));
      log_err.push_back(std::log2(err));
    }
    const double slope = -regression_slope(log_n, log_err);
    out.push_back(detail::check_within("solver.order." + std::string(solver_name(c.solver)),
                                       slope, c.order, 0.2));
  }
  out.push_back(detail::check_eq("solver.euler_4seg_growth",
                                 detail::integrate_exponential(Solver::euler, 4, 0.0),
                                 2.44140625));
  out.push_back(detail::check_lt("solver.runtime_seconds", detail::seconds_since(t0), 1.0));
  return out;
}

// --- guidance algebra -----------------------------------------------------

// The guided field is v + alpha * (v - u): identical branches collapse to v
// for any alpha, alpha = 0 returns the conditional tensor itself (same
// storage, no arithmetic), and guidance doubles the realized evaluation
// count exactly.
inline std::vector<CheckResult> check_guidance_algebra(uint64_t seed = 1003) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  std::vector<double> vv(12), uu(12);
  for (auto& x : vv) x = rng.normal();
  for (auto& x : uu) x = rng.normal();
  Tensor<double> v({3, 4}, vv), u({3, 4}, uu);

  int64_t mismatches = 0;
  for (double alpha : {0.5, 2.0, 3.0}) {
    auto same = cfg_combine(v, v, alpha);
    for (std::size_t i = 0; i < vv.size(); ++i)
      if (same.data()[i] != vv[i]) ++mismatches;
  }
  out.push_back(detail::check_eq("cfg.identical_branch_mismatches",
                                 static_cast<double>(mismatches), 0.0));

  auto zero_alpha = cfg_combine(v, u, 0.0);
  out.push_back(detail::check_eq("cfg.alpha0_returns_same_storage",
                                 zero_alpha.impl() == v.impl() ? 1.0 : 0.0, 1.0));

  int uncond_calls = 0;
  auto vf = detail::exponential_growth_field(&uncond_calls);
  auto x0 = Tensor<double>::scalar(1.0);
  auto plain = build_schedule(6, 0.0, Solver::heun3, 0.0);
  auto r_plain = integrate(vf, x0, plain);
  out.push_back(detail::check_eq("cfg.alpha0_unconditional_calls",
                                 static_cast<double>(uncond_calls), 0.0));
  auto guided = build_schedule(6, 0.0, Solver::heun3, 2.0);
  auto r_guided = integrate(vf, x0, guided);
  out.push_back(detail::check_eq("cfg.guided_eval_ratio",
                                 static_cast<double>(r_guided.evals) /
                                     static_cast<double>(r_plain.evals),
                                 2.0));
  const double count_err =
      std::abs(static_cast<double>(nfe_count(plain) - r_plain.evals)) +
      std::abs(static_cast<double>(nfe_count(guided) - r_guided.evals));
  out.push_back(detail::check_eq("cfg.nfe_counter_error", count_err, 0.0));
  return out;
}

// --- architectural identities ----------------------------------------------

namespace detail {

inline ModelConfig probe_model_config() {
  ModelConfig cfg;
  cfg.feat_dim = 4;
  cfg.capacity = 32;
  cfg.dit_layers = 1;
  cfg.dit_dim = 16;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.convnext_layers = 1;
  cfg.convnext_dim = 8;
  cfg.convnext_ffn_mult = 2;
  cfg.vocab_size = 8;
  cfg.dropout = 0.0;
  return cfg;
}

template <class S>
Tensor<S> random_tensor(const Shape& shape, Rng& rng) {
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal());
  return Tensor<S>(shape, std::move(v));
}

inline ExtendedSequence sequence_of(std::vector<int64_t> ids, int64_t effective) {
  ExtendedSequence z;
  z.ids = std::move(ids);
  z.effective_len = effective;
  return z;
}

}  // namespace detail

// Zero-initialized modulation must leave the transformer residual stream
// bit-identical to its input, and rotary attention logits must not move
// (beyond roundoff) under a uniform position shift.
inline std::vector<CheckResult> check_model_identities(uint64_t seed = 1004) {
  std::vector<CheckResult> out;
  Rng rng(seed);

  VectorFieldModel<double> model(detail::probe_model_config(), rng);
  auto noisy = detail::random_tensor<double>({6, 4}, rng);
  auto masked = detail::random_tensor<double>({6, 4}, rng);
  auto z = detail::sequence_of({1, 2, 3, 0, 0, 0}, 3);
  ForwardTrace<double> trace;
  model.forward(noisy, masked, z, 0.3, &trace);
  int64_t mismatches = 0;
  for (std::size_t i = 0; i < trace.dit_input.data().size(); ++i)
    if (trace.dit_input.data()[i] != trace.dit_output.data()[i]) ++mismatches;
  out.push_back(detail::check_eq("identity.zero_gate_residual_mismatches",
                                 static_cast<double>(mismatches), 0.0));

  auto q = detail::random_tensor<double>({2, 6, 8}, rng);
  auto k = detail::random_tensor<double>({2, 6, 8}, rng);
  auto logits_at = [&](int64_t offset) {
    return bmm(rope_apply(q, 10000.0, offset), transpose(rope_apply(k, 10000.0, offset)));
  };
  auto l0 = logits_at(0), l7 = logits_at(7);
  double max_abs = 0.0, max_diff = 0.0;
  for (std::size_t i = 0; i < l0.data().size(); ++i) {
    max_abs = std::max(max_abs, std::abs(l0.data()[i]));
    max_diff = std::max(max_diff, std::abs(l0.data()[i] - l7.data()[i]));
  }
  out.push_back(
      detail::check_lt("identity.rope_shift_relative_drift", max_diff / max_abs, 1e-5));
  return out;
}

// --- gradients --------------------------------------------------------------

namespace detail {

// Accumulates named finite-difference probes and reports the worst relative
// error per group.
struct GradProbeSet {
  Rng rng;
  std::map<std::string, std::pair<double, bool>> groups;  // name -> (max rel err, pass)
  std::set<std::string> covered_primitives;

  explicit GradProbeSet(uint64_t seed) : rng(seed) {}

  Tensor<double> uniform_tensor(const Shape& shape, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(shape, std::move(v));
  }

  void record(const std::string& group, const GradCheckReport& rep) {
    auto& slot = groups.emplace(group, std::make_pair(0.0, true)).first->second;
    slot.first = std::max(slot.first, rep.max_rel_error);
    slot.second = slot.second && rep.pass;
  }

  // d(sum(op(x) .* W))/dx against central differences with a fixed random W.
  void probe(const std::string& group, const Tensor<double>& point,
             const std::function<Tensor<double>(const Tensor<double>&)>& op,
             const char* primitive = nullptr) {
    if (primitive) covered_primitives.insert(primitive);
    auto w = uniform_tensor(op(point).shape());
    record(group, grad_check(
                      [&](const Tensor<double>& t) { return sum(mul(op(t), w)); }, point));
  }

  // Scalar-valued probe without the weighting layer (for reductions).
  void probe_scalar(const std::string& group, const Tensor<double>& point,
                    const std::function<Tensor<double>(const Tensor<double>&)>& op,
                    const char* primitive = nullptr) {
    if (primitive) covered_primitives.insert(primitive);
    record(group, grad_check([&](const Tensor<double>& t) { return op(t); }, point));
  }
};

// Finite-difference coverage for every differentiable primitive.
inline void probe_all_primitives(GradProbeSet& ps) {
  auto shape = Shape{3, 5};
  auto b = ps.uniform_tensor(shape, 0.5, 2.0);
  ps.probe("grad.op.add", ps.uniform_tensor(shape),
           [&](const Tensor<double>& t) { return add(t, b); }, "add");
  ps.probe("grad.op.sub", ps.uniform_tensor(shape),
           [&](const Tensor<double>& t) { return sub(b, t); }, "sub");
  ps.probe("grad.op.mul", ps.uniform_tensor(shape),
           [&](const Tensor<double>& t) { return mul(t, b); }, "mul");
  ps.probe("grad.op.div", ps.uniform_tensor(shape),
           [&](const Tensor<double>& t) { return div(t, b); }, "div");
  auto num = ps.uniform_tensor(shape);
  ps.probe("grad.op.div", ps.uniform_tensor(shape, 0.5, 2.0),
           [&](const Tensor<double>& t) { return div(num, t); });
  ps.probe("grad.op.add_scalar", ps.uniform_tensor(shape),
           [](const Tensor<double>& t) { return add_scalar(t, 0.7); }, "add_scalar");
  ps.probe("grad.op.mul_scalar", ps.uniform_tensor(shape),
           [](const Tensor<double>& t) { return mul_scalar(t, -1.3); }, "mul_scalar");
  ps.probe("grad.op.sqrt", ps.uniform_tensor(shape, 0.5, 3.0),
           [](const Tensor<double>& t) { return swayflow::sqrt(t); }, "sqrt");
  ps.probe("grad.op.neg", ps.uniform_tensor(shape),
           [](const Tensor<double>& t) { return neg(t); }, "neg");

  auto b2 = ps.uniform_tensor({5, 4});
  ps.probe("grad.op.matmul", ps.uniform_tensor({3, 5}),
           [&](const Tensor<double>& t) { return matmul(t, b2); }, "matmul");
  auto a2 = ps.uniform_tensor({3, 5});
  ps.probe("grad.op.matmul", ps.uniform_tensor({5, 4}),
           [&](const Tensor<double>& t) { return matmul(a2, t); });
  auto b3 = ps.uniform_tensor({2, 5, 4});
  ps.probe("grad.op.bmm", ps.uniform_tensor({2, 3, 5}),
           [&](const Tensor<double>& t) { return bmm(t, b3); }, "bmm");
  auto a3 = ps.uniform_tensor({2, 3, 5});
  ps.probe("grad.op.bmm", ps.uniform_tensor({2, 5, 4}),
           [&](const Tensor<double>& t) { return bmm(a3, t); });

  ps.probe("grad.op.transpose", ps.uniform_tensor({2, 3, 4}),
           [](const Tensor<double>& t) { return transpose(t); }, "transpose");
  ps.probe("grad.op.permute", ps.uniform_tensor({2, 3, 4}),
           [](const Tensor<double>& t) { return permute(t, {2, 0, 1}); }, "permute");
  ps.probe("grad.op.reshape", ps.uniform_tensor({4, 6}),
           [](const Tensor<double>& t) { return reshape(t, {3, 8}); }, "reshape");
  auto other = ps.uniform_tensor({3, 2});
  ps.probe("grad.op.concat", ps.uniform_tensor({3, 5}),
           [&](const Tensor<double>& t) { return concat<double>({t, other, t}, 1); },
           "concat");
  ps.probe("grad.op.slice", ps.uniform_tensor({6, 7}),
           [](const Tensor<double>& t) { return slice(t, 1, 2, 3); }, "slice");
  ps.probe("grad.op.expand", ps.uniform_tensor({4, 1}),
           [](const Tensor<double>& t) { return expand(t, {2, 4, 5}); }, "expand");

  ps.probe_scalar("grad.op.sum", ps.uniform_tensor({3, 4}),
                  [](const Tensor<double>& t) { return sum(t); }, "sum");
  ps.probe_scalar("grad.op.mean", ps.uniform_tensor({2, 5}),
                  [](const Tensor<double>& t) { return mean(t); }, "mean");
  ps.probe("grad.op.softmax", ps.uniform_tensor({3, 5}),
           [](const Tensor<double>& t) { return softmax(t); }, "softmax");
  ps.probe("grad.op.gelu", ps.uniform_tensor({3, 5}),
           [](const Tensor<double>& t) { return gelu(t); }, "gelu");
  ps.probe("grad.op.silu", ps.uniform_tensor({3, 5}),
           [](const Tensor<double>& t) { return silu(t); }, "silu");
  ps.probe("grad.op.layer_norm", ps.uniform_tensor({4, 6}),
           [](const Tensor<double>& t) { return layer_norm(t, 1e-6); }, "layer_norm");
  auto gamma = ps.uniform_tensor({6}, 0.5, 1.5);
  auto beta = ps.uniform_tensor({6});
  ps.probe("grad.op.layer_norm_affine", ps.uniform_tensor({4, 6}),
           [&](const Tensor<double>& t) { return layer_norm(t, gamma, beta, 1e-6); },
           "layer_norm_affine");
  auto ln_x = ps.uniform_tensor({4, 6});
  ps.probe("grad.op.layer_norm_affine", gamma,
           [&](const Tensor<double>& t) { return layer_norm(ln_x, t, beta, 1e-6); });
  ps.probe("grad.op.layer_norm_affine", beta,
           [&](const Tensor<double>& t) { return layer_norm(ln_x, gamma, t, 1e-6); });

  std::vector<int64_t> ids{0, 3, 1, 3, 2};
  ps.probe("grad.op.embedding", ps.uniform_tensor({5, 4}),
           [&](const Tensor<double>& t) { return embedding(t, ids); }, "embedding");

  auto w_dw = ps.uniform_tensor({3, 5});
  auto b_dw = ps.uniform_tensor({3});
  auto conv_x = ps.uniform_tensor({7, 3});
  ps.probe("grad.op.conv1d_depthwise", conv_x,
           [&](const Tensor<double>& t) { return conv1d_depthwise(t, w_dw, &b_dw); },
           "conv1d_depthwise");
  ps.probe("grad.op.conv1d_depthwise", w_dw,
           [&](const Tensor<double>& t) { return conv1d_depthwise(conv_x, t, &b_dw); });
  ps.probe("grad.op.conv1d_depthwise", b_dw,
           [&](const Tensor<double>& t) { return conv1d_depthwise(conv_x, w_dw, &t); });
  auto w_full = ps.uniform_tensor({4, 3, 5});
  auto b_full = ps.uniform_tensor({4});
  ps.probe("grad.op.conv1d", conv_x,
           [&](const Tensor<double>& t) { return conv1d(t, w_full, &b_full); }, "conv1d");
  ps.probe("grad.op.conv1d", w_full,
           [&](const Tensor<double>& t) { return conv1d(conv_x, t, &b_full); });
  ps.probe("grad.op.conv1d", b_full,
           [&](const Tensor<double>& t) { return conv1d(conv_x, w_full, &t); });
}

// Central-difference check of a sub-network: the input and every one of its
// parameters, through a fixed random readout.
template <class ForwardFn, class ForEachParam>
void probe_block(GradProbeSet& ps, const std::string& group, const Tensor<double>& input,
                 ForwardFn&& fwd, ForEachParam&& for_each_param) {
  auto w = ps.uniform_tensor(fwd(input).shape());
  auto loss_of = [&](const Tensor<double>& x) { return sum(mul(fwd(x), w)); };
  ps.record(group, grad_check(loss_of, input));
  for_each_param([&](const std::string&, Tensor<double>& p) {
    Tensor<double> saved = p;
    ps.record(group, grad_check(
                         [&](const Tensor<double>& candidate) {
                           p = candidate;
                           auto loss = loss_of(input);
                           p = saved;
                           return loss;
                         },
                         saved));
  });
}

// Full training loss against central differences for the input and every
// model parameter.
inline void probe_full_model(GradProbeSet& ps, const std::string& group,
                             VectorFieldModel<double>& model) {
  auto noisy = ps.uniform_tensor({6, model.cfg.feat_dim});
  auto masked = ps.uniform_tensor({6, model.cfg.feat_dim});
  auto target = ps.uniform_tensor({6, model.cfg.feat_dim});
  Tensor<double> mask({6}, {0, 1, 1, 1, 0, 1});
  auto z = sequence_of({1, 2, 3, 4, 0, 0}, 4);
  const double t = 0.62;
  auto loss_now = [&]() {
    return cfm_loss(model.forward(noisy, masked, z, t), target, mask);
  };
  ps.record(group, grad_check(
                       [&](const Tensor<double>& x) {
                         return cfm_loss(model.forward(x, masked, z, t), target, mask);
                       },
                       noisy));
  model.for_each_param([&](const std::string&, Tensor<double>& p) {
    Tensor<double> saved = p;
    ps.record(group, grad_check(
                         [&](const Tensor<double>& candidate) {
                           p = candidate;
                           auto loss = loss_now();
                           p = saved;
                           return loss;
                         },
                         saved));
  });
}

}  // namespace detail

// Central-difference gradient checks (64-bit, step 1e-5, tolerance 1e-4)
// for every primitive, each architectural block, and the full training loss
// at initialization and after five plain gradient steps.
inline std::vector<CheckResult> check_gradients(uint64_t seed = 1005) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::GradProbeSet ps(seed);
  detail::probe_all_primitives(ps);

  // catalogue coverage: every registered differentiable primitive was probed
  int64_t missing = 0;
  for (const auto& kind : primitive_catalogue())
    if (ps.covered_primitives.count(kind) == 0) ++missing;

  {  // feature-mixing block, with the normally-zero gains made live
    ConvNextBlock<double> block;
    block.init(8, 2, ps.rng);
    for (auto& x : block.grn_g.mutable_data()) x = 0.02 * ps.rng.normal();
    for (auto& x : block.grn_b.mutable_data()) x = 0.02 * ps.rng.normal();
    detail::probe_block(
        ps, "grad.block.convnext", ps.uniform_tensor({6, 8}),
        [&](const Tensor<double>& x) { return block.forward(x); },
        [&](const std::function<void(const std::string&, Tensor<double>&)>& fn) {
          block.for_each_param("block", fn);
        });
  }
  {  // transformer block, with the normally-zero modulation made live
    DitBlock<double> block;
    block.init(16, 2, ps.rng);
    for (auto& x : block.mod_w.mutable_data()) x = 0.02 * ps.rng.normal();
    for (auto& x : block.mod_b.mutable_data()) x = 0.02 * ps.rng.normal();
    auto cond = ps.uniform_tensor({1, 16});
    detail::probe_block(
        ps, "grad.block.transformer", ps.uniform_tensor({5, 16}),
        [&](const Tensor<double>& x) { return block.forward(x, cond, 2, 10000.0); },
        [&](const std::function<void(const std::string&, Tensor<double>&)>& fn) {
          block.for_each_param("block", fn);
        });
    // and through the conditioning vector
    auto x_fixed = ps.uniform_tensor({5, 16});
    ps.probe("grad.block.transformer", cond, [&](const Tensor<double>& c) {
      return block.forward(x_fixed, c, 2, 10000.0);
    });
  }
  {
    Rng model_rng(seed + 1);
    VectorFieldModel<double> model(detail::probe_model_config(), model_rng);
    detail::probe_block(
        ps, "grad.block.conv_position", ps.uniform_tensor({7, 16}),
        [&](const Tensor<double>& x) { return model.conv_position(x); },
        [&](const std::function<void(const std::string&, Tensor<double>&)>& fn) {
          fn("pos1_w", model.pos1_w);
          fn("pos1_b", model.pos1_b);
          fn("pos2_w", model.pos2_w);
          fn("pos2_b", model.pos2_b);
        });

    // flow-step embedding: parameters only (the step itself is not a tensor)
    auto w = ps.uniform_tensor({1, 16});
    auto readout = [&]() { return sum(mul(model.embed_flow_step(0.37), w)); };
    for (Tensor<double>* p : {&model.time_fc1_w, &model.time_fc1_b, &model.time_fc2_w,
                              &model.time_fc2_b}) {
      Tensor<double> saved = *p;
      ps.record("grad.block.flow_step_mlp", grad_check(
                                                [&](const Tensor<double>& candidate) {
                                                  *p = candidate;
                                                  auto loss = readout();
                                                  *p = saved;
                                                  return loss;
                                                },
                                                saved));
    }

    detail::probe_full_model(ps, "grad.model.at_init", model);

    // five plain gradient steps wake up the zero-initialized gates
    auto noisy = ps.uniform_tensor({6, 4});
    auto masked = ps.uniform_tensor({6, 4});
    auto target = ps.uniform_tensor({6, 4});
    auto mask = Tensor<double>::ones({6});
    auto z = detail::sequence_of({1, 2, 3, 4, 5, 0}, 5);
    for (int step = 0; step < 5; ++step) {
      model.zero_grads();
      Graph<double> g;
      auto loss = cfm_loss(model.forward(noisy, masked, z, 0.3 + 0.1 * step), target, mask);
      g.backward(loss);
      model.for_each_param([&](const std::string&, Tensor<double>& p) {
        if (!p.impl()->grad.empty())
          for (int64_t i = 0; i < p.numel(); ++i) p.mutable_data()[i] -= 0.05 * p.grad()[i];
      });
    }
    detail::probe_full_model(ps, "grad.model.after_steps", model);
  }

  std::vector<CheckResult> out;
  out.push_back(
      detail::check_eq("grad.catalogue_uncovered", static_cast<double>(missing), 0.0));
  for (const auto& [group, slot] : ps.groups) {
    CheckResult c = detail::check_lt(group + ".max_rel_error", slot.first, 1e-4);
    c.pass = c.pass && slot.second;
    out.push_back(std::move(c));
  }
  out.push_back(detail::check_lt("grad.runtime_seconds", detail::seconds_since(t0), 120.0));
  return out;
}

// --- training-protocol statistics -------------------------------------------

// Measures the empirical statistics the training loop is specified by: the
// infilling span covers 85% of frames on average, the staged condition
// dropout hits its two marginal rates, and clipping bounds the global
// gradient norm while leaving small gradients untouched.
inline std::vector<CheckResult> check_training_statistics(uint64_t seed = 1006) {
  std::vector<CheckResult> out;
  const int64_t n = 100'000;
  {
    Rng rng(seed);
    double total = 0.0;
    const int64_t len = 100;
    for (int64_t i = 0; i < n; ++i) {
      auto m = make_infilling_mask<double>(len, rng);
      for (double v : m.data()) total += v;
    }
    out.push_back(detail::check_within("train.mask_mean_fraction",
                                       total / static_cast<double>(n * len), 0.85, 0.005));
  }
  {
    Rng rng(seed + 1);
    int64_t audio = 0, both = 0;
    for (int64_t i = 0; i < n; ++i) {
      switch (draw_cond_mode(rng, 0.3, 0.2)) {
        case CondMode::drop_audio: ++audio; break;
        case CondMode::drop_audio_and_text: ++both; break;
        case CondMode::keep: break;
      }
    }
    out.push_back(detail::check_within("train.cfg_drop_audio_rate",
                                       static_cast<double>(audio) / static_cast<double>(n),
                                       0.30, 0.01));
    out.push_back(detail::check_within("train.cfg_drop_both_rate",
                                       static_cast<double>(both) / static_cast<double>(n),
                                       0.14, 0.01));
  }
  {
    Rng rng(seed + 2);
    double max_post = 0.0, report_err = 0.0;
    int64_t passthrough_mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Tensor<double>> tensors;
      ParamList<double> params;
      const int n_params = 1 + static_cast<int>(rng.below(4));
      for (int i = 0; i < n_params; ++i)
        tensors.push_back(Tensor<double>::zeros({1 + static_cast<int64_t>(rng.below(40))}));
      double sq = 0.0;
      for (auto& t : tensors) {
        t.set_requires_grad(true);
        t.impl()->grad.assign(static_cast<std::size_t>(t.numel()), 0.0);
        for (auto& g : t.impl()->grad) {
          g = rng.normal();
          sq += g * g;
        }
      }
      // scale to a spread of target norms straddling the bound
      const double targets[] = {0.25, 0.999, 1.0, 1.5, 10.0, 1e6};
      const double target = targets[trial % 6];
      const double scale = target / std::max(std::sqrt(sq), 1e-300);
      for (auto& t : tensors)
        for (auto& g : t.impl()->grad) g *= scale;
      for (std::size_t i = 0; i < tensors.size(); ++i)
        params.emplace_back("p" + std::to_string(i), &tensors[i]);

      std::vector<std::vector<double>> before;
      for (auto& t : tensors) before.push_back(t.impl()->grad);
      double pre = 0.0;
      for (auto& t : tensors)
        for (double g : t.impl()->grad) pre += g * g;
      pre = std::sqrt(pre);

      const double reported = clip_gradients(params, 1.0);
      report_err = std::max(report_err, std::abs(reported - pre));

      double post = 0.0;
      for (auto& t : tensors)
        for (double g : t.impl()->grad) post += g * g;
      max_post = std::max(max_post, std::sqrt(post));
      if (pre <= 1.0)
        for (std::size_t i = 0; i < tensors.size(); ++i)
          if (tensors[i].impl()->grad != before[i]) ++passthrough_mismatches;
    }
    out.push_back(detail::check_le("train.clip_max_post_norm", max_post, 1.0 + 1e-6));
    out.push_back(detail::check_eq("train.clip_passthrough_mismatches",
                                   static_cast<double>(passthrough_mismatches), 0.0));
    out.push_back(detail::check_eq("train.clip_reported_norm_error", report_err, 0.0));
  }
  return out;
}

// --- determinism and persistence ---------------------------------------------

namespace detail {

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail("cannot read ", p.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::filesystem::path fresh_dir(const std::filesystem::path& p) {
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace detail

// Fixed seeds must give byte-identical corpora, a checkpoint round-trip must
// reproduce the uninterrupted loss trajectory exactly, and inference must be
// reproducible from its seed.
inline std::vector<CheckResult> check_determinism(const std::string& scratch_dir,
                                                  uint64_t seed = 1007) {
  namespace fs = std::filesystem;
  std::vector<CheckResult> out;
  const fs::path root = detail::fresh_dir(scratch_dir);
  auto rule = make_default_rule(seed, 6, 10, 0.05);

  const int64_t count = 12;
  auto corpus_a = generate_corpus((root / "corpus_a").string(), count, rule, true);
  generate_corpus((root / "corpus_b").string(), count, rule, true);
  int64_t file_mismatches = 0;
  std::vector<std::string> rels{"rule.json", "vocab.txt", "manifest.json"};
  for (int64_t i = 0; i < count; ++i) rels.push_back("data/utt" + std::to_string(i) + ".f32");
  for (const auto& rel : rels)
    if (detail::file_bytes(root / "corpus_a" / rel) != detail::file_bytes(root / "corpus_b" / rel))
      ++file_mismatches;
  out.push_back(detail::check_eq("determinism.corpus_file_mismatches",
                                 static_cast<double>(file_mismatches), 0.0));

  ModelConfig mc = detail::probe_model_config();
  mc.feat_dim = rule.feat_dim;
  mc.vocab_size = rule.n_symbols() + 1;
  mc.capacity = 128;  // prompt and continuation are concatenated at inference
  mc.dropout = 0.1;
  TrainingConfig tc;
  tc.warmup_updates = 2;
  tc.total_updates = 40;
  tc.batch_frames = 48;
  tc.seed = seed + 1;

  const std::string ckpt = (root / "state.ckpt").string();
  std::vector<double> uninterrupted;
  {
    Rng mr(seed + 2);
    VectorFieldModel<float> model(mc, mr);
    Trainer<float> trainer(model, corpus_a, tc);
    for (int i = 0; i < 3; ++i) trainer.step();
    save_checkpoint(ckpt, trainer);
    for (int i = 0; i < 2; ++i) uninterrupted.push_back(trainer.step().loss);
  }
  int64_t loss_mismatches = 0;
  {
    Rng mr(seed + 99);  // different init; the checkpoint must supersede it
    VectorFieldModel<float> model(mc, mr);
    Trainer<float> trainer(model, corpus_a, tc);
    load_checkpoint(ckpt, trainer);
    for (int i = 0; i < 2; ++i)
      if (trainer.step().loss != uninterrupted[static_cast<std::size_t>(i)]) ++loss_mismatches;
  }
  out.push_back(detail::check_eq("determinism.resumed_loss_mismatches",
                                 static_cast<double>(loss_mismatches), 0.0));

  {
    Rng mr(seed + 3);
    VectorFieldModel<float> model(mc, mr);
    auto vocab = load_corpus_vocab(corpus_a.dir);
    auto make_request = [&](uint64_t s) {
      Rng prompt_rng(s);
      InferenceRequest<float> req;
      req.prompt_text = corpus_a.entries[0].text;
      req.gen_text = corpus_a.entries[1].text;
      req.prompt_features = sample_noisy_features(rule, req.prompt_text, prompt_rng);
      req.gen_frames = oracle_frames(rule, req.gen_text);
      req.nfe = 8;
      req.cfg_alpha = 1.0;
      req.seed = s;
      return req;
    };
    auto r1 = infer(model, vocab, make_request(404));
    auto r2 = infer(model, vocab, make_request(404));
    auto r3 = infer(model, vocab, make_request(405));
    int64_t repro_mismatches = 0;
    for (std::size_t i = 0; i < r1.features.data().size(); ++i)
      if (r1.features.data()[i] != r2.features.data()[i]) ++repro_mismatches;
    out.push_back(detail::check_eq("determinism.inference_replay_mismatches",
                                   static_cast<double>(repro_mismatches), 0.0));
    out.push_back(detail::check_eq("determinism.inference_seed_sensitivity",
                                   r1.features.data() != r3.features.data() ? 1.0 : 0.0,
                                   1.0));
  }
  return out;
}

// --- end-to-end toy run ---------------------------------------------------

struct EndToEndOptions {
  std::string work_dir;
  int64_t corpus_count = 768;
  uint64_t corpus_seed = 101;
  // Inference concatenates prompt and generated frames, so the evaluation
  // lengths below are chosen to keep every concatenated sequence inside the
  // training length distribution.
  int64_t corpus_min_symbols = 2, corpus_max_symbols = 6;
  int64_t eval_prompt_min = 1, eval_prompt_max = 2;
  int64_t eval_gen_min = 2, eval_gen_max = 3;
  uint64_t model_seed = 7;
  ModelConfig model = [] {
    ModelConfig m;
    m.capacity = 128;
    m.dropout = 0.0;  // the deterministic toy mapping needs precision, not regularization
    return m;
  }();
  TrainingConfig training = [] {
    TrainingConfig t;
    t.seed = 9;
    t.batch_frames = 256;  // more optimizer steps per frame: alignment forms earlier
    t.warmup_updates = 400;
    t.total_updates = 16000;
    return t;
  }();
  int64_t eval_cases = 25;
  uint64_t eval_seed = 555;
  int64_t nfe = 32;
  double cfg_alpha = 2.0;
  double leak_t_prime = 0.1;
  // The leaked-start comparison probes how step placement resolves marginal
  // content decisions, so it runs at a coarser schedule and milder guidance
  // where the decision is not already saturated.
  int64_t leak_nfe = 8;
  double leak_cfg_alpha = 0.5;
  double train_minutes_bound = 20.0;
  int64_t log_every = 200;  // 0 silences progress lines
};

struct EndToEndReport {
  std::vector<CheckResult> infill;  // synthesis quality of the trained model
  std::vector<CheckResult> leak;    // override behaviour from a leaked start state
  double train_minutes = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;

  std::vector<CheckResult> all() const {
    std::vector<CheckResult> out = infill;
    out.insert(out.end(), leak.begin(), leak.end());
    return out;
  }
};

namespace detail {

struct EvalCase {
  std::string prompt_text, gen_text, leak_text;
  uint64_t seed = 0;
};

struct EvalSummary {
  double recovery = 0.0;        // symbols recovered, aggregated over all cases
  double case_success = 0.0;    // fraction of cases with per-case recovery >= 0.8
  double mse = 0.0;             // per-element MSE against the clean oracle
};

template <class S>
EvalSummary evaluate_cases(VectorFieldModel<S>& model, const Vocabulary& vocab,
                           const CorpusRule& rule, const std::vector<EvalCase>& cases,
                           int64_t nfe, double sway, double cfg_alpha, bool leak,
                           double t_prime) {
  int64_t hits = 0, total = 0, successes = 0;
  double sq_sum = 0.0;
  int64_t elements = 0;
  for (const auto& c : cases) {
    Rng feature_rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
    InferenceRequest<S> req;
    req.prompt_text = c.prompt_text;
    req.gen_text = c.gen_text;
    req.prompt_features = sample_noisy_features(rule, c.prompt_text, feature_rng);
    req.gen_frames = oracle_frames(rule, c.gen_text);
    req.nfe = nfe;
    req.solver = Solver::euler;
    req.sway = sway;
    req.cfg_alpha = cfg_alpha;
    req.seed = c.seed;
    InferenceResult<S> res;
    if (leak) {
      auto leak_features = sample_noisy_features(rule, c.leak_text, feature_rng);
      res = infer_with_leak(model, vocab, req, leak_features, t_prime);
    } else {
      res = infer(model, vocab, req);
    }
    std::vector<double> out(res.features.data().begin(), res.features.data().end());
    const double rec = symbol_recovery(rule, c.gen_text, out, res.gen_frames);
    hits += static_cast<int64_t>(std::llround(rec * static_cast<double>(c.gen_text.size())));
    total += static_cast<int64_t>(c.gen_text.size());
    if (rec >= 0.8) ++successes;
    // reference: the generated slice of the whole utterance's clean rendering,
    // whose first frame fades in from the prompt's final symbol
    const auto full = oracle_features(rule, c.prompt_text + c.gen_text);
    const auto base = static_cast<std::size_t>(res.prompt_frames * full.dim(1));
    std::vector<double> clean(full.data().begin() + static_cast<std::ptrdiff_t>(base),
                              full.data().end());
    sq_sum += frame_mse(out, clean) * static_cast<double>(out.size());
    elements += static_cast<int64_t>(out.size());
  }
  EvalSummary s;
  s.recovery = static_cast<double>(hits) / static_cast<double>(total);
  s.case_success = static_cast<double>(successes) / static_cast<double>(cases.size());
  s.mse = sq_sum / static_cast<double>(elements);
  return s;
}

}  // namespace detail

// Trains the default toy configuration from scratch on a generated corpus,
// then scores held-out synthesis with and without schedule warping, plain
// and from a partially leaked start state. The report's checks encode the
// quality bars; progress goes to `log` when given.
inline EndToEndReport run_end_to_end(const EndToEndOptions& opt, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  EndToEndReport report;
  fs::create_directories(opt.work_dir);
  auto rule = make_default_rule(opt.corpus_seed, opt.model.feat_dim, 16, 0.05);
  auto corpus = generate_corpus((fs::path(opt.work_dir) / "corpus").string(), opt.corpus_count,
                                rule, true, opt.corpus_min_symbols, opt.corpus_max_symbols);
  std::set<std::string> train_texts;
  for (const auto& e : corpus.entries) train_texts.insert(e.text);

  Rng model_rng(opt.model_seed);
  VectorFieldModel<float> model(opt.model, model_rng);
  Trainer<float> trainer(model, corpus, opt.training);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> recent;
  for (int64_t u = 0; u < opt.training.total_updates; ++u) {
    auto stats = trainer.step();
    if (u == 0) report.initial_loss = stats.loss;
    recent.push_back(stats.loss);
    if (recent.size() > 50) recent.erase(recent.begin());
    if (log && opt.log_every > 0 &&
        (u % opt.log_every == 0 || u + 1 == opt.training.total_updates)) {
      (*log) << "update " << stats.update << " loss " << format_value(stats.loss) << " lr "
             << format_value(stats.lr) << " grad_norm " << format_value(stats.grad_norm)
             << '\n';
      log->flush();
    }
  }
  report.train_minutes = detail::seconds_since(t0) / 60.0;
  report.final_loss = mean_of(recent);

  // inference always runs on the averaged weights
  trainer.ema().copy_to(trainer.params());
  const auto vocab = load_corpus_vocab(corpus.dir);

  Rng eval_rng(opt.eval_seed);
  std::vector<detail::EvalCase> cases;
  while (static_cast<int64_t>(cases.size()) < opt.eval_cases) {
    detail::EvalCase c;
    c.prompt_text = sample_string(rule, eval_rng, opt.eval_prompt_min, opt.eval_prompt_max);
    c.gen_text = sample_string(rule, eval_rng, opt.eval_gen_min, opt.eval_gen_max);
    c.leak_text = sample_string(rule, eval_rng, opt.eval_gen_min, opt.eval_gen_max);
    c.seed = eval_rng.below(uint64_t{1} << 30);
    if (train_texts.count(c.gen_text)) continue;  // held out
    cases.push_back(std::move(c));
  }

  auto eval = [&](double sway, bool leak) {
    return detail::evaluate_cases(model, vocab, rule, cases, leak ? opt.leak_nfe : opt.nfe,
                                  sway, leak ? opt.leak_cfg_alpha : opt.cfg_alpha, leak,
                                  opt.leak_t_prime);
  };
  const auto plain_warped = eval(-1.0, false);
  const auto plain_uniform = eval(0.0, false);
  const auto leak_warped = eval(-1.0, true);
  const auto leak_uniform = eval(0.0, true);
  if (log) {
    (*log) << "plain s=-1: recovery " << format_value(plain_warped.recovery) << " mse "
           << format_value(plain_warped.mse) << "\nplain s=0: recovery "
           << format_value(plain_uniform.recovery) << " mse "
           << format_value(plain_uniform.mse) << "\nleak  s=-1: case success "
           << format_value(leak_warped.case_success) << "\nleak  s=0: case success "
           << format_value(leak_uniform.case_success) << '\n';
    log->flush();
  }

  const double noise_floor = rule.noise_sigma * rule.noise_sigma;
  report.infill.push_back(detail::check_le("e2e.train_minutes", report.train_minutes,
                                           opt.train_minutes_bound));
  report.infill.push_back(detail::check_lt("e2e.loss_ratio_last50_over_initial",
                                           report.final_loss / report.initial_loss, 0.1));
  report.infill.push_back(
      detail::check_ge("e2e.symbol_recovery.s=-1", plain_warped.recovery, 0.9));
  report.infill.push_back(detail::check_lt("e2e.mse_over_noise_floor.s=-1",
                                           plain_warped.mse / noise_floor, 3.0));
  report.infill.push_back(detail::check_ge("e2e.warped_minus_uniform_recovery",
                                           plain_warped.recovery - plain_uniform.recovery,
                                           0.0));
  report.leak.push_back(
      detail::check_ge("leak.case_success.s=-1", leak_warped.case_success, 0.8));
  report.leak.push_back(detail::check_gt("leak.warped_minus_uniform_success",
                                         leak_warped.case_success - leak_uniform.case_success,
                                         0.0));
  return report;
}

// --- suite registry ----------------------------------------------------------

inline const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"sway", "solvers", "gradcheck", "identities",
                                              "e2e"};
  return names;
}

// Runs one named suite. `scratch_dir` backs suites that need files; `log`
// receives progress lines for the long-running suite.
inline std::vector<CheckResult> run_verify_suite(const std::string& suite,
                                                 const std::string& scratch_dir,
                                                 std::ostream* log = nullptr) {
  if (suite == "sway") {
    auto out = check_sway_distribution();
    append_checks(out, check_sway_shape());
    return out;
  }
  if (suite == "solvers") return check_solver_orders();
  if (suite == "gradcheck") return check_gradients();
  if (suite == "identities") {
    auto out = check_guidance_algebra();
    append_checks(out, check_model_identities());
    return out;
  }
  if (suite == "e2e") {
    auto out = check_training_statistics();
    append_checks(out, check_determinism(scratch_dir + "/determinism"));
    EndToEndOptions opt;
    opt.work_dir = scratch_dir + "/e2e";
    append_checks(out, run_end_to_end(opt, log).all());
    return out;
  }
  std::string names;
  for (const auto& n : verify_suite_names()) names += (names.empty() ? "" : ", ") + n;
  fail("unknown verify suite '", suite, "' (valid: ", names, ")");
}

}  // namespace swayflow

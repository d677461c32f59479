#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "swayflow/rng.hpp"
#include "swayflow/sampler.hpp"
#include "swayflow/stats.hpp"

using namespace swayflow;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("schedule warp fixes the endpoints exactly", "[sampler]") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double s = -1.0 + rng.uniform() * (1.0 + sway_coefficient_max());
    REQUIRE(sway_sample(0.0, s) == 0.0);
    REQUIRE(sway_sample(1.0, s) == 1.0);
  }
}

TEST_CASE("schedule warp is strictly increasing across the coefficient range", "[sampler]") {
  Rng rng(2);
  for (int i = 0; i < 10'000; ++i) {
    const double s = -1.0 + rng.uniform() * (1.0 + sway_coefficient_max());
    double a = rng.uniform(), b = rng.uniform();
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    REQUIRE(sway_sample(a, s) < sway_sample(b, s));
  }
}

TEST_CASE("out-of-range sway coefficients are rejected", "[sampler]") {
  REQUIRE_THROWS_WITH(sway_sample(0.5, -1.0001), ContainsSubstring("outside [-1,"));
  REQUIRE_THROWS_WITH(sway_sample(0.5, sway_coefficient_max() + 1e-6),
                      ContainsSubstring("outside [-1,"));
  REQUIRE_NOTHROW(sway_sample(0.5, -1.0));
  REQUIRE_NOTHROW(sway_sample(0.5, sway_coefficient_max()));
  REQUIRE_THAT(sway_coefficient_max(), WithinAbs(1.7519383938841087, 1e-15));
}

TEST_CASE("schedule warp matches pinned values at s = -1", "[sampler]") {
  REQUIRE_THAT(sway_sample(0.25, -1.0), WithinAbs(0.07612046748871326, 1e-15));
  REQUIRE_THAT(sway_sample(0.5, -1.0), WithinAbs(0.29289321881345254, 1e-15));
  REQUIRE_THAT(sway_sample(0.75, -1.0), WithinAbs(0.6173165676349102, 1e-15));
  // s = 0 is the identity
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double u = rng.uniform();
    REQUIRE(sway_sample(u, 0.0) == u);
  }
}

TEST_CASE("warp inverse round-trips to bisection accuracy", "[sampler]") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double s = -1.0 + rng.uniform() * (1.0 + sway_coefficient_max());
    const double u = rng.uniform();
    const double t = sway_sample(u, s);
    REQUIRE_THAT(sway_inverse(t, s), WithinAbs(u, 1e-9));
  }
}

TEST_CASE("schedules enumerate warped boundaries and segment counts", "[sampler]") {
  auto sched = build_schedule(4, -1.0, Solver::euler, 0.0);
  REQUIRE(sched.segments() == 4);
  REQUIRE(sched.steps.front() == 0.0);
  REQUIRE(sched.steps.back() == 1.0);
  REQUIRE_THAT(sched.steps[1], WithinAbs(0.07612046748871326, 1e-15));
  REQUIRE_THAT(sched.steps[2], WithinAbs(0.29289321881345254, 1e-15));
  REQUIRE_THAT(sched.steps[3], WithinAbs(0.6173165676349102, 1e-15));

  REQUIRE(build_schedule(32, 0.0, Solver::midpoint, 0.0).segments() == 16);
  REQUIRE(build_schedule(30, 0.0, Solver::heun3, 0.0).segments() == 10);

  // an unwarped grid is bitwise i/n
  auto flat = build_schedule(8, 0.0, Solver::euler, 0.0);
  for (int i = 0; i <= 8; ++i) REQUIRE(flat.steps[i] == static_cast<double>(i) / 8.0);
}

TEST_CASE("schedules reject budgets the solver cannot spend", "[sampler]") {
  REQUIRE_THROWS_WITH(build_schedule(0, 0.0, Solver::euler, 0.0),
                      ContainsSubstring("positive"));
  REQUIRE_THROWS_WITH(build_schedule(33, 0.0, Solver::midpoint, 0.0),
                      ContainsSubstring("multiple of 2 for midpoint"));
  REQUIRE_THROWS_WITH(build_schedule(32, 0.0, Solver::heun3, 0.0),
                      ContainsSubstring("multiple of 3 for heun3"));
  REQUIRE_THROWS_WITH(build_schedule(8, 0.0, Solver::euler, -0.5),
                      ContainsSubstring("cfg_alpha"));
  REQUIRE_THROWS_WITH(solver_from_name("rk4"), ContainsSubstring("unknown solver"));
  REQUIRE(solver_from_name("heun3") == Solver::heun3);
}

TEST_CASE("guidance combination hits pinned values and alpha = 0 is a no-op", "[sampler]") {
  Tensor<double> v({2}, {2.0, -1.0});
  Tensor<double> u({2}, {1.0, 1.0});
  auto g2 = cfg_combine(v, u, 2.0);
  REQUIRE(g2.data() == std::vector<double>{4.0, -5.0});
  auto gh = cfg_combine(v, u, 0.5);
  REQUIRE(gh.data() == std::vector<double>{2.5, -2.0});

  auto g0 = cfg_combine(v, u, 0.0);
  REQUIRE(g0.impl() == v.impl());  // same storage, not a copy
  REQUIRE_THROWS_WITH(cfg_combine(v, u, -1.0), ContainsSubstring("alpha must be >= 0"));
  // identical branches collapse to the conditional field for any alpha
  auto same = cfg_combine(v, v, 3.0);
  REQUIRE(same.data() == v.data());
}

namespace {

VectorField<double> exponential_field(int* uncond_calls = nullptr) {
  VectorField<double> vf;
  vf.conditional = [](const Tensor<double>& x, double) { return x; };
  vf.unconditional = [uncond_calls](const Tensor<double>& x, double) {
    if (uncond_calls) ++(*uncond_calls);
    return mul_scalar(x, 0.5);
  };
  return vf;
}

double integrate_exponential(Solver solver, int64_t segments, double sway) {
  auto vf = exponential_field();
  auto sched = build_schedule(segments * evals_per_segment(solver), sway, solver, 0.0);
  return integrate(vf, Tensor<double>::scalar(1.0), sched).state.item();
}

}  // namespace

TEST_CASE("euler on dx/dt = x over four uniform segments is exact in binary", "[sampler]") {
  REQUIRE(integrate_exponential(Solver::euler, 4, 0.0) == 2.44140625);
}

TEST_CASE("one-segment growth factors match the solvers' closed forms", "[sampler]") {
  const double h = 0.25;
  const double euler_f = 1.0 + h;
  const double mid_f = 1.0 + h + h * h / 2.0;
  const double heun_f = 1.0 + h + h * h / 2.0 + h * h * h / 6.0;
  auto pow4 = [](double f) { const double f2 = f * f; return f2 * f2; };
  REQUIRE_THAT(integrate_exponential(Solver::euler, 4, 0.0), WithinRel(pow4(euler_f), 1e-12));
  REQUIRE_THAT(integrate_exponential(Solver::midpoint, 4, 0.0), WithinRel(pow4(mid_f), 1e-12));
  REQUIRE_THAT(integrate_exponential(Solver::heun3, 4, 0.0), WithinRel(pow4(heun_f), 1e-12));
}

TEST_CASE("empirical convergence orders match each solver", "[sampler]") {
  const double sway = GENERATE(0.0, -1.0);
  const struct { Solver solver; double order; } cases[] = {
      {Solver::euler, 1.0}, {Solver::midpoint, 2.0}, {Solver::heun3, 3.0}};
  for (const auto& c : cases) {
    std::vector<double> log_n, log_err;
    for (int64_t segs : {4, 8, 16, 32, 64}) {
      const double err = std::abs(integrate_exponential(c.solver, segs, sway) - std::exp(1.0));
      log_n.push_back(std::log2(static_cast<double>(segs)));
      log_err.push_back(std::log2(err));
    }
    const double slope = regression_slope(log_n, log_err);
    INFO(solver_name(c.solver) << " sway=" << sway << " slope=" << slope);
    REQUIRE_THAT(slope, WithinAbs(-c.order, 0.2));
  }
}

TEST_CASE("guidance doubles realized evaluations; alpha = 0 never consults the "
          "unconditional branch", "[sampler]") {
  int uncond_calls = 0;
  auto vf = exponential_field(&uncond_calls);
  auto x0 = Tensor<double>::scalar(1.0);

  auto plain = build_schedule(6, 0.0, Solver::heun3, 0.0);
  auto r0 = integrate(vf, x0, plain);
  REQUIRE(uncond_calls == 0);
  REQUIRE(r0.evals == 6);
  REQUIRE(r0.evals == nfe_count(plain));

  auto guided = build_schedule(6, 0.0, Solver::heun3, 2.0);
  auto r2 = integrate(vf, x0, guided);
  REQUIRE(uncond_calls == 6);
  REQUIRE(r2.evals == 12);
  REQUIRE(r2.evals == nfe_count(guided));

  VectorField<double> cond_only;
  cond_only.conditional = vf.conditional;
  REQUIRE_THROWS_WITH(integrate(cond_only, x0, guided),
                      ContainsSubstring("requires an unconditional field"));
}

TEST_CASE("guided integration applies the combination at every evaluation", "[sampler]") {
  // cond = x, uncond = x/2, alpha = 1 => effective field 1.5 x; euler over
  // 2 uniform segments gives (1 + 1.5 * 0.5)^2 = 3.0625 exactly
  auto vf = exponential_field();
  auto sched = build_schedule(2, 0.0, Solver::euler, 1.0);
  auto res = integrate(vf, Tensor<double>::scalar(1.0), sched);
  REQUIRE(res.state.item() == 3.0625);
  REQUIRE(res.evals == 4);
}

TEST_CASE("integration aborts on non-finite state and names the step", "[sampler]") {
  VectorField<double> vf;
  vf.conditional = [](const Tensor<double>& x, double t) {
    return t >= 0.5 ? mul_scalar(x, std::numeric_limits<double>::quiet_NaN()) : x;
  };
  auto sched = build_schedule(4, 0.0, Solver::euler, 0.0);
  REQUIRE_THROWS_WITH(integrate(vf, Tensor<double>::scalar(1.0), sched),
                      ContainsSubstring("non-finite state after step 2"));
}

TEST_CASE("warped flow steps follow the analytic distribution", "[sampler]") {
  Rng rng(77);
  const int n = 200'000;
  for (double s : {-1.0, 0.0, 1.0}) {
    std::vector<double> mapped(n);
    for (auto& t : mapped) t = sway_sample(rng.uniform(), s);
    const double d = ks_statistic(mapped, [s](double t) { return sway_inverse(t, s); });
    INFO("s=" << s << " ks=" << d);
    REQUIRE(d < 0.005);
    const double med = median_of(mapped);
    if (s < 0.0) REQUIRE(med < 0.5);
    if (s > 0.0) REQUIRE(med > 0.5);
    if (s == 0.0) REQUIRE_THAT(med, WithinAbs(0.5, 0.005));
  }
}

TEST_CASE("leak-and-override validates its window and mixes the start state", "[sampler]") {
  auto vf = exponential_field();
  auto sched = build_schedule(4, 0.0, Solver::euler, 0.0);
  auto x0 = Tensor<double>::scalar(1.0);
  auto leak = Tensor<double>::scalar(3.0);

  REQUIRE_THROWS_WITH(leak_and_override(vf, x0, leak, 1.0, sched),
                      ContainsSubstring("last schedule step"));
  REQUIRE_THROWS_WITH(leak_and_override(vf, x0, leak, -0.1, sched),
                      ContainsSubstring("t_prime"));
  REQUIRE_THROWS_WITH(leak_and_override(vf, x0, Tensor<double>({2}, {2.0, 1.0}), 0.1, sched),
                      ContainsSubstring("shape mismatch"));

  // t' = 0 degenerates to plain integration from x0
  auto full = integrate(vf, x0, sched);
  auto zero_leak = leak_and_override(vf, x0, leak, 0.0, sched);
  REQUIRE(zero_leak.state.item() == full.state.item());
  REQUIRE(zero_leak.evals == full.evals);

  // t' = 0.1 starts from 0.9 * x0 + 0.1 * leak and compresses the whole
  // 4-segment uniform grid onto [0.1, 1]: nodes 0.1, 0.325, 0.55, 0.775, 1,
  // so four euler segments of h = 0.225 on dx/dt = x
  auto mixed = leak_and_override(vf, x0, leak, 0.1, sched);
  const double start = 0.9 * 1.0 + 0.1 * 3.0;
  const double expect = start * 1.225 * 1.225 * 1.225 * 1.225;
  REQUIRE_THAT(mixed.state.item(), WithinRel(expect, 1e-12));
  REQUIRE(mixed.evals == 4);  // full step budget, rescaled not sliced
}

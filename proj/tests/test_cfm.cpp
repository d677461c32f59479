#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "swayflow/cfm.hpp"
#include "swayflow/gradcheck.hpp"
#include "swayflow/stats.hpp"

using namespace swayflow;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

TEST_CASE("ot_interpolate endpoints and midpoint", "[cfm]") {
  Tensor<double> x0({2}, {0, 0});
  Tensor<double> x1({2}, {2, 4});
  REQUIRE(ot_interpolate(x0, x1, 0.0).data() == x0.data());
  REQUIRE(ot_interpolate(x0, x1, 1.0).data() == x1.data());
  REQUIRE(ot_interpolate(x0, x1, 0.25).data() == std::vector<double>{0.5, 1.0});

  REQUIRE_THROWS_WITH(ot_interpolate(x0, Tensor<double>::ones({3}), 0.5),
                      ContainsSubstring("shape mismatch"));
  REQUIRE_THROWS_WITH(ot_interpolate(x0, x1, 1.5), ContainsSubstring("outside [0, 1]"));
  REQUIRE_THROWS_WITH(ot_interpolate(x0, x1, -0.1), ContainsSubstring("outside [0, 1]"));
}

TEST_CASE("ot_interpolate composes affinely in t", "[cfm]") {
  Rng rng(9);
  Tensor<double> x0 = sample_noise<double>({3, 4}, rng);
  Tensor<double> x1 = sample_noise<double>({3, 4}, rng);
  for (int rep = 0; rep < 20; ++rep) {
    const double t = rng.uniform(), u = rng.uniform();
    auto two_hop = ot_interpolate(ot_interpolate(x0, x1, t), x1, u);
    auto direct = ot_interpolate(x0, x1, t + u * (1.0 - t));
    for (int64_t i = 0; i < direct.numel(); ++i)
      REQUIRE_THAT(two_hop.data()[i], WithinAbs(direct.data()[i], 1e-12));
  }
}

TEST_CASE("cfm_loss pinned values", "[cfm]") {
  Tensor<double> target({2}, {1, 3});
  Tensor<double> ones_mask({2}, {1, 1});

  auto zero = cfm_loss(target, target, ones_mask);
  REQUIRE(zero.item() == 0.0);

  Tensor<double> off_by_one({2}, {2, 4});
  REQUIRE_THAT(cfm_loss(off_by_one, target, ones_mask).item(), WithinAbs(1.0, 1e-12));

  Tensor<double> v({2}, {0, 0});
  Tensor<double> tail_mask({2}, {0, 1});
  REQUIRE_THAT(cfm_loss(v, target, tail_mask).item(), WithinAbs(9.0, 1e-12));
}

TEST_CASE("cfm_loss averages only masked frames of multichannel input", "[cfm]") {
  Tensor<double> v({3, 2}, {0, 0, 0, 0, 0, 0});
  Tensor<double> target({3, 2}, {1, 1, 5, 5, 2, 2});
  Tensor<double> mask({3}, {1, 0, 1});
  // masked frames contribute (1,1,4,4) squared over 4 elements
  REQUIRE_THAT(cfm_loss(v, target, mask).item(), WithinAbs((1.0 + 1.0 + 4.0 + 4.0) / 4.0, 1e-12));
}

TEST_CASE("cfm_loss rejects malformed masks", "[cfm]") {
  Tensor<double> v({2}, {0, 0});
  Tensor<double> target({2}, {1, 3});
  REQUIRE_THROWS_WITH(cfm_loss(v, target, Tensor<double>({2}, {0, 0})),
                      ContainsSubstring("selects no positions"));
  REQUIRE_THROWS_WITH(cfm_loss(v, target, Tensor<double>({2}, {0.5, 1})),
                      ContainsSubstring("binary"));
  REQUIRE_THROWS_WITH(cfm_loss(v, target, Tensor<double>({3}, {1, 1, 1})),
                      ContainsSubstring("mask has 3 entries"));
}

TEST_CASE("cfm_loss gradient matches finite differences and respects the mask", "[cfm]") {
  Rng rng(17);
  auto target = sample_noise<double>({4, 3}, rng);
  Tensor<double> mask({4}, {1, 0, 1, 0});
  auto point = sample_noise<double>({4, 3}, rng);
  auto rep = grad_check(
      [&](const Tensor<double>& t) { return cfm_loss(t, target, mask); }, point);
  CHECK(rep.pass);

  // unmasked frames must get exactly zero gradient
  Tensor<double> x = point.clone();
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = cfm_loss(x, target, mask);
  g.backward(loss);
  for (int64_t c = 0; c < 3; ++c) {
    REQUIRE(x.grad()[1 * 3 + c] == 0.0);
    REQUIRE(x.grad()[3 * 3 + c] == 0.0);
  }
}

TEST_CASE("flow-step and noise samplers match their distributions", "[cfm]") {
  Rng rng(123);
  const int n = 1'000'000;
  std::vector<double> ts(n);
  for (auto& t : ts) t = sample_training_step(rng);
  REQUIRE_THAT(mean_of(ts), WithinAbs(0.5, 0.002));
  REQUIRE(ks_statistic(ts, [](double t) { return t; }) < 0.002);

  auto noise = sample_noise<double>({n}, rng);
  std::vector<double> nv(noise.data().begin(), noise.data().end());
  REQUIRE_THAT(mean_of(nv), WithinAbs(0.0, 0.005));
  REQUIRE_THAT(variance_of(nv), WithinAbs(1.0, 0.01));

  REQUIRE(sample_noise<double>({0}, rng).numel() == 0);

  // draws are independent per call, not shared
  Rng r2(7);
  REQUIRE(sample_training_step(r2) != sample_training_step(r2));
}

TEST_CASE("a linear field trained by gradient descent fits the probe-path regression",
          "[cfm]") {
  Rng rng(42);
  const int64_t n = 4096;
  // scalar data distribution with a well-separated mean so the optimum is
  // far below the zero-initialized loss
  std::vector<double> feat(static_cast<std::size_t>(n * 3));
  std::vector<double> tgt(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x0 = rng.normal();
    const double x1 = 5.0 + 0.5 * rng.normal();
    const double t = sample_training_step(rng);
    const double psi = (1.0 - t) * x0 + t * x1;
    feat[i * 3 + 0] = psi;
    feat[i * 3 + 1] = t;
    feat[i * 3 + 2] = 1.0;
    tgt[i] = x1 - x0;
  }
  Tensor<double> features({n, 3}, feat);
  Tensor<double> target({n, 1}, tgt);
  auto mask = Tensor<double>::ones({n});

  Tensor<double> w = Tensor<double>::zeros({3, 1});
  w.set_requires_grad(true);
  std::vector<double> velocity_mom(3, 0.0);
  const double lr = 0.1, beta = 0.9;
  std::vector<double> history;
  for (int step = 0; step < 2000; ++step) {
    w.zero_grad();
    Graph<double> g;
    auto loss = cfm_loss(matmul(features, w), target, mask);
    history.push_back(loss.item());
    g.backward(loss);
    for (int i = 0; i < 3; ++i) {
      velocity_mom[i] = beta * velocity_mom[i] + w.grad()[i];
      w.mutable_data()[i] -= lr * velocity_mom[i];
    }
  }
  const double initial = history.front();
  const double final_loss = history.back();
  REQUIRE(final_loss < 0.05 * initial);
  // monotone at coarse scale once past warmup
  for (std::size_t k = 600; k < history.size(); k += 200)
    REQUIRE(history[k] <= history[k - 200] + 1e-9);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>
#include <vector>

#include "swayflow/ops.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/tensor.hpp"

using namespace swayflow;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("tensor construction and shape validation", "[tensor]") {
  Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.shape() == Shape{2, 3});
  REQUIRE(t.numel() == 6);

  REQUIRE_THROWS_WITH((Tensor<double>({2, 2}, {1, 2, 3})),
                      ContainsSubstring("does not match shape"));
  REQUIRE_THROWS_WITH(Tensor<double>::zeros({-1, 3}),
                      ContainsSubstring("negative dimension"));

  // zero-sized axes make an empty tensor
  auto e = Tensor<double>::zeros({0});
  REQUIRE(e.numel() == 0);
}

TEST_CASE("elementwise op shape mismatches are rejected with shapes named", "[tensor]") {
  auto a = Tensor<double>::ones({2, 2});
  auto b = Tensor<double>::ones({2, 3});
  REQUIRE_THROWS_WITH(add(a, b), ContainsSubstring("[2, 2]") && ContainsSubstring("[2, 3]"));
  auto c = Tensor<double>::ones({3, 2});
  REQUIRE_NOTHROW(matmul(a, b));
  REQUIRE_THROWS_WITH(matmul(a, c), ContainsSubstring("inner dimensions"));
}

TEST_CASE("softmax of a constant row is uniform", "[tensor]") {
  auto y = softmax(Tensor<double>({1, 3}, {0, 0, 0}));
  for (double v : y.data()) REQUIRE(v == 1.0 / 3.0);
}

TEST_CASE("layer_norm output statistics", "[tensor]") {
  auto y = layer_norm(Tensor<double>({1, 3}, {1, 2, 3}), 1e-6);
  const auto& v = y.data();
  double m = (v[0] + v[1] + v[2]) / 3.0;
  REQUIRE(std::abs(m) < 1e-12);
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  var /= 3.0;
  REQUIRE(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("matmul with identity returns operand exactly", "[tensor]") {
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<double> a({3, 2}, {0.1, -2.5, 3.75, 4.125, -0.5, 7.25});
  auto y = matmul(eye, a);
  REQUIRE(y.data() == a.data());
}

TEST_CASE("reshape and transpose round-trips are bit-exact", "[tensor]") {
  Rng rng(11);
  std::vector<double> vals(12);
  for (auto& v : vals) v = rng.normal();
  Tensor<double> x({3, 4}, vals);
  auto r = reshape(reshape(x, {2, 6}), {3, 4});
  REQUIRE(r.data() == x.data());
  auto t = transpose(transpose(x));
  REQUIRE(t.data() == x.data());
  auto p = permute(permute(x, {1, 0}), {1, 0});
  REQUIRE(p.data() == x.data());
}

TEST_CASE("backward of sum of squares", "[graph]") {
  Tensor<double> x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(mul(x, x));
  g.backward(loss);
  REQUIRE(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward of sum(matmul(A,B)) gives ones-weighted products", "[graph]") {
  Rng rng(3);
  std::vector<double> av(6), bv(12);
  for (auto& v : av) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  Tensor<double> a({2, 3}, av);
  Tensor<double> b({3, 4}, bv);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(matmul(a, b));
  g.backward(loss);
  // dL/dA[i,p] = sum_j B[p,j]; dL/dB[p,j] = sum_i A[i,p]
  for (int i = 0; i < 2; ++i)
    for (int p = 0; p < 3; ++p) {
      double expect = 0;
      for (int j = 0; j < 4; ++j) expect += bv[p * 4 + j];
      REQUIRE_THAT(a.grad()[i * 3 + p], Catch::Matchers::WithinRel(expect, 1e-12));
    }
  for (int p = 0; p < 3; ++p)
    for (int j = 0; j < 4; ++j) {
      double expect = av[p] + av[3 + p];
      REQUIRE_THAT(b.grad()[p * 4 + j], Catch::Matchers::WithinRel(expect, 1e-12));
    }
}

TEST_CASE("loss constant in x yields zero gradient", "[graph]") {
  Tensor<double> x({4}, {1, -2, 3, -4});
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(mul_scalar(x, 0.0));
  g.backward(loss);
  REQUIRE(x.grad() == std::vector<double>(4, 0.0));
}

TEST_CASE("gradients are linear across separate backward passes", "[graph]") {
  Rng rng(5);
  std::vector<double> xv(6), c1(6), c2(6);
  for (auto& v : xv) v = rng.normal();
  for (auto& v : c1) v = rng.normal();
  for (auto& v : c2) v = rng.normal();
  Tensor<double> x({6}, xv);
  x.set_requires_grad(true);
  Tensor<double> w1({6}, c1), w2({6}, c2);

  auto grads_of = [&](auto make_loss) {
    x.zero_grad();
    Graph<double> g;
    auto loss = make_loss();
    g.backward(loss);
    return x.grad();
  };
  auto g1 = grads_of([&] { return sum(mul(gelu(x), w1)); });
  auto g2 = grads_of([&] { return sum(mul(silu(x), w2)); });
  auto g12 = grads_of([&] { return add(sum(mul(gelu(x), w1)), sum(mul(silu(x), w2))); });
  for (int i = 0; i < 6; ++i)
    REQUIRE_THAT(g12[i], Catch::Matchers::WithinAbs(g1[i] + g2[i], 1e-12));
}

TEST_CASE("replaying backward twice is an error, not accumulation", "[graph]") {
  Tensor<double> x({2}, {1, 2});
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(mul(x, x));
  g.backward(loss);
  REQUIRE_THROWS_WITH(g.backward(loss), ContainsSubstring("new Graph"));
}

TEST_CASE("non-scalar and detached losses are rejected", "[graph]") {
  Tensor<double> x({2}, {1, 2});
  x.set_requires_grad(true);
  {
    Graph<double> g;
    auto y = mul(x, x);
    REQUIRE_THROWS_WITH(g.backward(y), ContainsSubstring("scalar"));
  }
  Tensor<double> detached_loss;
  {
    // loss produced while no graph is active records nothing
    detached_loss = sum(mul(x, x));
    REQUIRE_FALSE(detached_loss.requires_grad());
  }
  REQUIRE_THROWS_WITH(backward(detached_loss), ContainsSubstring("no active Graph"));
  {
    Graph<double> g;
    REQUIRE_THROWS_WITH(g.backward(detached_loss), ContainsSubstring("detached"));
  }
}

TEST_CASE("graph nesting on one thread is rejected", "[graph]") {
  Graph<double> g;
  REQUIRE_THROWS_WITH(Graph<double>(), ContainsSubstring("already active"));
  // the failed constructor must not have clobbered the active graph
  REQUIRE(Graph<double>::current() == &g);
}

TEST_CASE("tape order is topological and ops without grad inputs do not record", "[graph]") {
  Tensor<double> x({2, 2}, {1, 2, 3, 4});
  Tensor<double> w({2, 2}, {0.5, -1, 2, 0.25});
  x.set_requires_grad(true);
  Graph<double> g;
  auto c = matmul(x, w);
  auto d = add(c, x);
  auto loss = sum(gelu(d));
  REQUIRE(g.topologically_ordered());
  const auto before = g.size();
  auto unrelated = mul(w, w);  // no input requires grad
  REQUIRE_FALSE(unrelated.requires_grad());
  REQUIRE(g.size() == before);
  g.backward(loss);
  REQUIRE(x.has_grad());
}

TEST_CASE("independent graphs on separate threads", "[graph]") {
  std::vector<std::vector<double>> grads(4);
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([t, &grads] {
      Tensor<double> x({3}, {1.0 + t, 2.0, 3.0});
      x.set_requires_grad(true);
      Graph<double> g;
      auto loss = sum(mul(x, x));
      g.backward(loss);
      grads[t] = x.grad();
    });
  }
  for (auto& w : workers) w.join();
  for (int t = 0; t < 4; ++t) {
    REQUIRE(grads[t] == std::vector<double>{2.0 * (1.0 + t), 4.0, 6.0});
  }
}

TEST_CASE("primitive dispatch rejects unknown kinds", "[tensor]") {
  auto a = Tensor<double>::ones({2});
  REQUIRE_THROWS_WITH(apply_primitive<double>("frobnicate", {a}),
                      ContainsSubstring("unknown primitive op-kind 'frobnicate'"));
  PrimitiveAttrs attrs;
  attrs.scalar = 3.0;
  auto y = apply_primitive<double>("mul_scalar", {a}, attrs);
  REQUIRE(y.data() == std::vector<double>{3, 3});
}

TEST_CASE("expand broadcasts and rejects incompatible targets", "[tensor]") {
  Tensor<double> col({3, 1}, {1, 2, 3});
  auto e = expand(col, {3, 4});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) REQUIRE(e.data()[r * 4 + c] == 1.0 + r);
  REQUIRE_THROWS_WITH(expand(col, {4, 4}), ContainsSubstring("cannot broadcast"));

  Tensor<double> row({4}, {1, 2, 3, 4});
  auto e2 = expand(row, {2, 4});
  REQUIRE(e2.data() == std::vector<double>{1, 2, 3, 4, 1, 2, 3, 4});
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "swayflow/cfm.hpp"
#include "swayflow/gradcheck.hpp"
#include "swayflow/model.hpp"

using namespace swayflow;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig tiny_config() {
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

ExtendedSequence seq_of(std::vector<int64_t> ids, int64_t m) {
  ExtendedSequence z;
  z.ids = std::move(ids);
  z.effective_len = m;
  return z;
}

template <class S>
Tensor<S> rand_tensor(const Shape& shape, Rng& rng) {
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal());
  return Tensor<S>(shape, std::move(v));
}

}  // namespace

TEST_CASE("config validation rejects inconsistent dimensions", "[model]") {
  ModelConfig cfg = tiny_config();
  REQUIRE_NOTHROW(cfg.validate());
  cfg.heads = 3;
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("not divisible"));
  cfg = tiny_config();
  cfg.dit_dim = 6;  // head dim 3 is odd
  cfg.heads = 2;
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("must be even"));
  cfg = tiny_config();
  cfg.dit_layers = 0;
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("dit_layers"));
  cfg = tiny_config();
  cfg.dropout = 1.0;
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("dropout"));
}

TEST_CASE("flow-step sinusoid starts at (0, 1) and separates the unit interval",
          "[model]") {
  auto v = sinusoid_features<double>(0.0, 16);
  REQUIRE(v.shape() == Shape{1, 16});
  for (int64_t i = 0; i < 8; ++i) {
    REQUIRE(v.data()[i] == 0.0);
    REQUIRE(v.data()[8 + i] == 1.0);
  }

  // every flow step on a 1e-3 grid maps to a distinct feature vector
  const int n = 1001;
  std::vector<std::vector<double>> feats;
  feats.reserve(n);
  for (int i = 0; i < n; ++i) {
    auto f = sinusoid_features<double>(kFlowStepScale * i / (n - 1), 16);
    feats.push_back(f.data());
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (feats[i] == feats[j]) FAIL("duplicate sinusoid features at grid " << i << "," << j);
}

TEST_CASE("flow-step embedding is pure and respects its domain", "[model]") {
  Rng rng(31);
  VectorFieldModel<double> model(tiny_config(), rng);
  auto a = model.embed_flow_step(0.37);
  auto b = model.embed_flow_step(0.37);
  REQUIRE(a.data() == b.data());
  REQUIRE(a.shape() == Shape{1, 16});
  REQUIRE(model.embed_flow_step(0.0).data() != model.embed_flow_step(1.0).data());
  REQUIRE_THROWS_WITH(model.embed_flow_step(1.5), ContainsSubstring("outside [0, 1]"));
}

TEST_CASE("rotary rotation is the identity at position zero", "[model]") {
  Rng rng(32);
  auto x = rand_tensor<double>({2, 5, 8}, rng);
  auto r = rope_apply(x, 10000.0);
  for (int64_t h = 0; h < 2; ++h)
    for (int64_t i = 0; i < 8; ++i)
      REQUIRE(r.data()[h * 5 * 8 + i] == x.data()[h * 5 * 8 + i]);
  REQUIRE_THROWS_WITH(rope_apply(rand_tensor<double>({1, 4, 5}, rng), 10000.0),
                      ContainsSubstring("must be even"));
}

TEST_CASE("attention logits are invariant under uniform position shifts", "[model]") {
  Rng rng(33);
  auto q = rand_tensor<double>({2, 6, 8}, rng);
  auto k = rand_tensor<double>({2, 6, 8}, rng);
  auto logits_at = [&](int64_t offset) {
    return bmm(rope_apply(q, 10000.0, offset), transpose(rope_apply(k, 10000.0, offset)));
  };
  auto l0 = logits_at(0), l7 = logits_at(7);
  double max_abs = 0.0, max_diff = 0.0;
  for (std::size_t i = 0; i < l0.data().size(); ++i) {
    max_abs = std::max(max_abs, std::abs(l0.data()[i]));
    max_diff = std::max(max_diff, std::abs(l0.data()[i] - l7.data()[i]));
  }
  REQUIRE(max_abs > 0.0);
  REQUIRE(max_diff / max_abs < 1e-5);
}

TEST_CASE("transformer blocks are the identity on the residual stream at init", "[model]") {
  Rng rng(34);
  VectorFieldModel<double> model(tiny_config(), rng);
  auto x = rand_tensor<double>({6, 16}, rng);
  auto cond = model.embed_flow_step(0.42);
  auto y = model.dit_blocks[0].forward(x, cond, model.cfg.heads, model.cfg.rope_base);
  REQUIRE(y.data() == x.data());

  // whole-stack trace on a full forward
  auto noisy = rand_tensor<double>({6, 4}, rng);
  auto masked = rand_tensor<double>({6, 4}, rng);
  auto z = seq_of({1, 2, 3, 0, 0, 0}, 3);
  ForwardTrace<double> trace;
  auto out = model.forward(noisy, masked, z, 0.3, &trace);
  REQUIRE(out.shape() == Shape{6, 4});
  REQUIRE(trace.dit_output.data() == trace.dit_input.data());
}

TEST_CASE("a zeroed ConvNeXt block reduces to the identity", "[model]") {
  Rng rng(35);
  ConvNextBlock<double> block;
  block.init(8, 2, rng);
  for (auto* w : {&block.dw_w, &block.pw1_w, &block.pw2_w, &block.dw_b, &block.pw1_b,
                  &block.pw2_b, &block.norm_b, &block.grn_g, &block.grn_b})
    *w = Tensor<double>::zeros(w->shape());
  auto x = rand_tensor<double>({6, 8}, rng);
  REQUIRE(block.forward(x).data() == x.data());
}

TEST_CASE("text refinement is token-independent on all-filler input", "[model]") {
  Rng rng(36);
  VectorFieldModel<double> model(tiny_config(), rng);
  auto z1 = seq_of({0, 0, 0, 0, 0}, 0);
  auto z2 = seq_of({0, 0, 0, 0, 0}, 0);
  auto a = model.refine_text(z1), b = model.refine_text(z2);
  REQUIRE(a.data() == b.data());
  REQUIRE(a.shape() == Shape{5, 8});

  // rows differ across positions (the sinusoid table is doing its job)
  bool any_row_differs = false;
  for (int64_t c = 0; c < 8 && !any_row_differs; ++c)
    any_row_differs = a.data()[0 * 8 + c] != a.data()[3 * 8 + c];
  REQUIRE(any_row_differs);

  auto bad = seq_of({0, 99, 0}, 1);
  REQUIRE_THROWS_WITH(model.refine_text(bad), ContainsSubstring("99"));
}

TEST_CASE("one ConvNeXt block passes central-difference checks", "[model][gradcheck]") {
  Rng rng(37);
  ConvNextBlock<double> block;
  block.init(8, 2, rng);
  auto point = rand_tensor<double>({6, 8}, rng);
  auto weights = rand_tensor<double>({6, 8}, rng);

  auto loss_through = [&](const Tensor<double>& x) { return sum(mul(block.forward(x), weights)); };
  auto rep = grad_check(loss_through, point);
  INFO(rep.note << " max_rel=" << rep.max_rel_error);
  REQUIRE(rep.pass);

  block.for_each_param("block", [&](const std::string& name, Tensor<double>& p) {
    Tensor<double> saved = p;
    auto rep_p = grad_check(
        [&](const Tensor<double>& candidate) {
          p = candidate;
          auto loss = sum(mul(block.forward(point), weights));
          p = saved;
          return loss;
        },
        saved);
    INFO(name << ": " << rep_p.note << " max_rel=" << rep_p.max_rel_error);
    REQUIRE(rep_p.pass);
  });
}

TEST_CASE("forward output shape holds across random configurations", "[model]") {
  Rng rng(38);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig cfg;
    cfg.heads = static_cast<int64_t>(1 + rng.below(3));
    cfg.dit_dim = cfg.heads * 2 * static_cast<int64_t>(1 + rng.below(3));
    cfg.dit_layers = static_cast<int64_t>(1 + rng.below(2));
    cfg.convnext_layers = static_cast<int64_t>(1 + rng.below(2));
    cfg.convnext_dim = 2 * static_cast<int64_t>(2 + rng.below(3));
    cfg.convnext_ffn_mult = static_cast<int64_t>(1 + rng.below(2));
    cfg.ffn_mult = static_cast<int64_t>(1 + rng.below(2));
    cfg.feat_dim = static_cast<int64_t>(2 + rng.below(4));
    cfg.vocab_size = static_cast<int64_t>(3 + rng.below(6));
    cfg.capacity = 64;
    cfg.dropout = 0.0;
    VectorFieldModel<float> model(cfg, rng);

    const auto len = static_cast<int64_t>(3 + rng.below(10));
    std::vector<int64_t> ids(static_cast<std::size_t>(len));
    for (auto& id : ids) id = static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
    auto out = model.forward(rand_tensor<float>({len, cfg.feat_dim}, rng),
                             rand_tensor<float>({len, cfg.feat_dim}, rng),
                             seq_of(ids, len), rng.uniform());
    REQUIRE(out.shape() == Shape{len, cfg.feat_dim});
  }
}

TEST_CASE("forward validates stream agreement", "[model]") {
  Rng rng(39);
  VectorFieldModel<double> model(tiny_config(), rng);
  auto noisy = rand_tensor<double>({6, 4}, rng);
  auto z = seq_of({1, 2, 3, 0, 0, 0}, 3);
  REQUIRE_THROWS_WITH(model.forward(noisy, rand_tensor<double>({5, 4}, rng), z, 0.5),
                      ContainsSubstring("shape mismatch"));
  REQUIRE_THROWS_WITH(
      model.forward(rand_tensor<double>({6, 3}, rng), rand_tensor<double>({6, 3}, rng), z, 0.5),
      ContainsSubstring("feature dim"));
  auto long_z = seq_of(std::vector<int64_t>(40, 0), 0);
  REQUIRE_THROWS_WITH(model.forward(rand_tensor<double>({40, 4}, rng),
                                    rand_tensor<double>({40, 4}, rng), long_z, 0.5),
                      ContainsSubstring("capacity"));
}

TEST_CASE("condition dropout modes transform inputs as documented", "[model]") {
  Rng rng(40);
  auto masked = rand_tensor<double>({5, 3}, rng);
  auto z = seq_of({2, 4, 1, 0, 0}, 3);

  auto [m_keep, z_keep] = drop_conditions(masked, z, CondMode::keep, 0);
  REQUIRE(m_keep.data() == masked.data());
  REQUIRE(z_keep.ids == z.ids);
  REQUIRE(z_keep.effective_len == 3);

  auto [m_audio, z_audio] = drop_conditions(masked, z, CondMode::drop_audio, 0);
  for (double v : m_audio.data()) REQUIRE(v == 0.0);
  REQUIRE(z_audio.ids == z.ids);

  auto [m_both, z_both] = drop_conditions(masked, z, CondMode::drop_audio_and_text, 0);
  for (double v : m_both.data()) REQUIRE(v == 0.0);
  REQUIRE(z_both.ids == std::vector<int64_t>{0, 0, 0, 0, 0});
  REQUIRE(z_both.effective_len == 0);
}

TEST_CASE("forward is deterministic for a fixed seed", "[model]") {
  auto build_and_run = [](uint64_t seed) {
    Rng rng(seed);
    VectorFieldModel<double> model(tiny_config(), rng);
    auto noisy = rand_tensor<double>({6, 4}, rng);
    auto masked = rand_tensor<double>({6, 4}, rng);
    return model.forward(noisy, masked, seq_of({1, 2, 3, 0, 0, 0}, 3), 0.44).data();
  };
  REQUIRE(build_and_run(123) == build_and_run(123));
  REQUIRE(build_and_run(123) != build_and_run(124));
}

namespace {

// Checks analytic gradients of the training loss against central differences
// for every named parameter and for the noisy input.
template <class ModelT>
void check_all_model_grads(ModelT& model, Rng& rng) {
  auto noisy = rand_tensor<double>({6, model.cfg.feat_dim}, rng);
  auto masked = rand_tensor<double>({6, model.cfg.feat_dim}, rng);
  auto target = rand_tensor<double>({6, model.cfg.feat_dim}, rng);
  Tensor<double> mask({6}, {0, 1, 1, 1, 0, 1});
  auto z = seq_of({1, 2, 3, 4, 0, 0}, 4);
  const double t = 0.62;

  auto loss_now = [&]() { return cfm_loss(model.forward(noisy, masked, z, t), target, mask); };

  auto rep_x = grad_check(
      [&](const Tensor<double>& x) {
        return cfm_loss(model.forward(x, masked, z, t), target, mask);
      },
      noisy);
  INFO("noisy input: " << rep_x.note << " max_rel=" << rep_x.max_rel_error);
  REQUIRE(rep_x.pass);

  model.for_each_param([&](const std::string& name, Tensor<double>& p) {
    Tensor<double> saved = p;
    auto rep = grad_check(
        [&](const Tensor<double>& candidate) {
          p = candidate;
          auto loss = loss_now();
          p = saved;
          return loss;
        },
        saved);
    INFO(name << ": " << rep.note << " max_rel=" << rep.max_rel_error);
    REQUIRE(rep.pass);
  });
}

}  // namespace

TEST_CASE("full-model gradients pass central differences at init and after steps",
          "[model][gradcheck]") {
  Rng rng(41);
  VectorFieldModel<double> model(tiny_config(), rng);
  check_all_model_grads(model, rng);

  // five plain gradient steps move every parameter off the init manifold
  auto noisy = rand_tensor<double>({6, 4}, rng);
  auto masked = rand_tensor<double>({6, 4}, rng);
  auto target = rand_tensor<double>({6, 4}, rng);
  auto mask = Tensor<double>::ones({6});
  auto z = seq_of({1, 2, 3, 4, 5, 0}, 5);
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
  // gates must now be live: the block is no longer the identity
  ForwardTrace<double> trace;
  model.forward(noisy, masked, z, 0.5, &trace);
  REQUIRE(trace.dit_output.data() != trace.dit_input.data());

  check_all_model_grads(model, rng);
}

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/ops.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/tensor.hpp"
#include "swayflow/text.hpp"

namespace swayflow {

struct ModelConfig {
  int64_t feat_dim = 8;       // speech feature channels
  int64_t capacity = 256;     // maximum sequence length
  int64_t dit_layers = 2;
  int64_t dit_dim = 64;
  int64_t heads = 4;
  int64_t ffn_mult = 2;
  int64_t convnext_layers = 2;
  int64_t convnext_dim = 32;
  int64_t convnext_ffn_mult = 2;
  int64_t vocab_size = 17;
  double rope_base = 10000.0;
  double dropout = 0.1;       // attention/FFN dropout during training only

  void validate() const {
    const struct { const char* name; int64_t v; } positives[] = {
        {"feat_dim", feat_dim},           {"capacity", capacity},
        {"dit_layers", dit_layers},       {"dit_dim", dit_dim},
        {"heads", heads},                 {"ffn_mult", ffn_mult},
        {"convnext_layers", convnext_layers},
        {"convnext_dim", convnext_dim},   {"convnext_ffn_mult", convnext_ffn_mult},
        {"vocab_size", vocab_size},
    };
    for (const auto& p : positives)
      if (p.v <= 0) fail("ModelConfig: ", p.name, " must be positive, got ", p.v);
    if (dit_dim % heads != 0)
      fail("ModelConfig: dit_dim ", dit_dim, " not divisible by heads ", heads);
    if ((dit_dim / heads) % 2 != 0)
      fail("ModelConfig: head dim ", dit_dim / heads, " must be even for rotary embedding");
    if (dit_dim % 2 != 0 || convnext_dim % 2 != 0)
      fail("ModelConfig: embedding dims must be even for sinusoidal tables");
    if (rope_base <= 1.0) fail("ModelConfig: rope_base must exceed 1");
    if (!(dropout >= 0.0 && dropout < 1.0))
      fail("ModelConfig: dropout must be in [0, 1), got ", dropout);
  }
};

namespace detail {

template <class S>
Tensor<S> normal_param(const Shape& shape, Rng& rng, double stddev = 0.02) {
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(stddev * rng.normal());
  Tensor<S> t(shape, std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <class S>
Tensor<S> const_param(const Shape& shape, double value) {
  Tensor<S> t = Tensor<S>::full(shape, static_cast<S>(value));
  t.set_requires_grad(true);
  return t;
}

// Adds a broadcast bias row to a (T, C) activation.
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  return add(x, expand(b, x.shape()));
}

// Inverted dropout; `rng == nullptr` means evaluation mode (identity).
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng* rng) {
  if (!rng || p <= 0.0) return x;
  std::vector<S> mask(static_cast<std::size_t>(x.numel()));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng->uniform() < p ? S(0) : keep_scale;
  return mul(x, Tensor<S>(x.shape(), std::move(mask)));
}

}  // namespace detail

// Sinusoidal features laid out [sin..., cos...]; `pos` may be fractional.
template <class S>
Tensor<S> sinusoid_features(double pos, int64_t dim, double max_period = 10000.0) {
  const int64_t half = dim / 2;
  std::vector<S> v(static_cast<std::size_t>(dim));
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::pow(max_period, -static_cast<double>(i) / static_cast<double>(half));
    v[static_cast<std::size_t>(i)] = static_cast<S>(std::sin(pos * freq));
    v[static_cast<std::size_t>(half + i)] = static_cast<S>(std::cos(pos * freq));
  }
  return Tensor<S>({1, dim}, std::move(v));
}

// Fixed absolute position table, shape (len, dim).
template <class S>
Tensor<S> sinusoid_table(int64_t len, int64_t dim, double max_period = 10000.0) {
  const int64_t half = dim / 2;
  std::vector<S> v(static_cast<std::size_t>(len * dim));
  for (int64_t p = 0; p < len; ++p)
    for (int64_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(max_period, -static_cast<double>(i) / static_cast<double>(half));
      v[static_cast<std::size_t>(p * dim + i)] = static_cast<S>(std::sin(p * freq));
      v[static_cast<std::size_t>(p * dim + half + i)] = static_cast<S>(std::cos(p * freq));
    }
  return Tensor<S>({len, dim}, std::move(v));
}

// The flow step enters the network scaled by 1000 so the sinusoid bank
// resolves the whole [0, 1] range injectively.
inline constexpr double kFlowStepScale = 1000.0;

// Rotation tables for rotary attention, shape (len, head_dim) each, with the
// two half-banks duplicated so rotate-half can use them elementwise.
template <class S>
std::pair<Tensor<S>, Tensor<S>> rope_tables(int64_t len, int64_t head_dim, double base,
                                            int64_t offset = 0) {
  const int64_t half = head_dim / 2;
  std::vector<S> c(static_cast<std::size_t>(len * head_dim));
  std::vector<S> s(static_cast<std::size_t>(len * head_dim));
  for (int64_t p = 0; p < len; ++p)
    for (int64_t j = 0; j < half; ++j) {
      const double theta =
          std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(p + offset) * theta;
      c[static_cast<std::size_t>(p * head_dim + j)] = static_cast<S>(std::cos(ang));
      c[static_cast<std::size_t>(p * head_dim + half + j)] = static_cast<S>(std::cos(ang));
      s[static_cast<std::size_t>(p * head_dim + j)] = static_cast<S>(std::sin(ang));
      s[static_cast<std::size_t>(p * head_dim + half + j)] = static_cast<S>(std::sin(ang));
    }
  return {Tensor<S>({len, head_dim}, std::move(c)), Tensor<S>({len, head_dim}, std::move(s))};
}

// Rotates per-head q/k features by their position angle. x is (heads, len,
// head_dim); position p gets angle (p + offset) * theta_j.
template <class S>
Tensor<S> rope_apply(const Tensor<S>& x, double base, int64_t offset = 0) {
  detail::check_rank("rope_apply", x, 3);
  const int64_t len = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) fail("rope_apply: head dim ", hd, " must be even");
  auto [cos_t, sin_t] = rope_tables<S>(len, hd, base, offset);
  auto cos_e = expand(cos_t, x.shape());
  auto sin_e = expand(sin_t, x.shape());
  auto lo = slice(x, 2, 0, hd / 2);
  auto hi = slice(x, 2, hd / 2, hd / 2);
  auto rotated = concat<S>({neg(hi), lo}, 2);
  return add(mul(x, cos_e), mul(rotated, sin_e));
}

// One ConvNeXt V2 block: depthwise conv -> layer norm -> pointwise expand ->
// GELU -> global response normalization -> pointwise contract, residual.
template <class S>
struct ConvNextBlock {
  Tensor<S> dw_w, dw_b;      // (C, 7), (C)
  Tensor<S> norm_g, norm_b;  // (C)
  Tensor<S> pw1_w, pw1_b;    // (C, H), (H)
  Tensor<S> grn_g, grn_b;    // (H), zero so the block starts near-identity
  Tensor<S> pw2_w, pw2_b;    // (H, C), (C)

  static constexpr int64_t kKernel = 7;
  static constexpr double kNormEps = 1e-6;
  static constexpr double kGrnEps = 1e-6;

  void init(int64_t c, int64_t mult, Rng& rng) {
    const int64_t h = c * mult;
    dw_w = detail::normal_param<S>({c, kKernel}, rng);
    dw_b = detail::const_param<S>({c}, 0.0);
    norm_g = detail::const_param<S>({c}, 1.0);
    norm_b = detail::const_param<S>({c}, 0.0);
    pw1_w = detail::normal_param<S>({c, h}, rng);
    pw1_b = detail::const_param<S>({h}, 0.0);
    grn_g = detail::const_param<S>({h}, 0.0);
    grn_b = detail::const_param<S>({h}, 0.0);
    pw2_w = detail::normal_param<S>({h, c}, rng);
    pw2_b = detail::const_param<S>({c}, 0.0);
  }

  // Global response normalization: scales each channel by its sequence-wide
  // L2 norm relative to the cross-channel mean of those norms.
  Tensor<S> grn(const Tensor<S>& x) const {
    const int64_t t_len = x.dim(0), h = x.dim(1);
    auto ones_row = Tensor<S>::ones({1, t_len});
    auto gx = sqrt(matmul(ones_row, mul(x, x)));                    // (1, H)
    auto mean_gx = mul_scalar(matmul(gx, Tensor<S>::ones({h, 1})), 1.0 / static_cast<double>(h));
    auto nx = div(gx, expand(add_scalar(mean_gx, kGrnEps), gx.shape()));
    auto scaled = mul(x, expand(nx, x.shape()));
    auto gained = add(mul(scaled, expand(grn_g, x.shape())), expand(grn_b, x.shape()));
    return add(gained, x);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    auto h = conv1d_depthwise(x, dw_w, &dw_b);
    h = layer_norm(h, norm_g, norm_b, kNormEps);
    h = gelu(detail::add_bias(matmul(h, pw1_w), pw1_b));
    h = grn(h);
    h = detail::add_bias(matmul(h, pw2_w), pw2_b);
    return add(x, h);
  }

  void for_each_param(const std::string& prefix,
                      const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn(prefix + ".dw_w", dw_w);
    fn(prefix + ".dw_b", dw_b);
    fn(prefix + ".norm_g", norm_g);
    fn(prefix + ".norm_b", norm_b);
    fn(prefix + ".pw1_w", pw1_w);
    fn(prefix + ".pw1_b", pw1_b);
    fn(prefix + ".grn_g", grn_g);
    fn(prefix + ".grn_b", grn_b);
    fn(prefix + ".pw2_w", pw2_w);
    fn(prefix + ".pw2_b", pw2_b);
  }
};

// Transformer block conditioned on the flow step through adaptive layer
// norm whose modulation projection starts at zero, so the whole block is the
// identity on the residual stream at initialization.
template <class S>
struct DitBlock {
  Tensor<S> mod_w, mod_b;  // (D, 6D), (6D) -- zero-initialized
  Tensor<S> qkv_w, qkv_b;  // (D, 3D), (3D)
  Tensor<S> out_w, out_b;  // (D, D), (D)
  Tensor<S> fc1_w, fc1_b;  // (D, mult*D), (mult*D)
  Tensor<S> fc2_w, fc2_b;  // (mult*D, D), (D)

  static constexpr double kNormEps = 1e-6;

  void init(int64_t d, int64_t mult, Rng& rng) {
    mod_w = detail::const_param<S>({d, 6 * d}, 0.0);
    mod_b = detail::const_param<S>({6 * d}, 0.0);
    qkv_w = detail::normal_param<S>({d, 3 * d}, rng);
    qkv_b = detail::const_param<S>({3 * d}, 0.0);
    out_w = detail::normal_param<S>({d, d}, rng);
    out_b = detail::const_param<S>({d}, 0.0);
    fc1_w = detail::normal_param<S>({d, mult * d}, rng);
    fc1_b = detail::const_param<S>({mult * d}, 0.0);
    fc2_w = detail::normal_param<S>({mult * d, d}, rng);
    fc2_b = detail::const_param<S>({d}, 0.0);
  }

  Tensor<S> attention(const Tensor<S>& x, int64_t heads, double rope_base) const {
    const int64_t t_len = x.dim(0), d = x.dim(1), hd = d / heads;
    auto qkv = detail::add_bias(matmul(x, qkv_w), qkv_b);
    auto to_heads = [&](Tensor<S> m) {
      return permute(reshape(std::move(m), {t_len, heads, hd}), {1, 0, 2});
    };
    auto q = rope_apply(to_heads(slice(qkv, 1, 0, d)), rope_base);
    auto k = rope_apply(to_heads(slice(qkv, 1, d, d)), rope_base);
    auto v = to_heads(slice(qkv, 1, 2 * d, d));
    auto logits = mul_scalar(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto ctx = bmm(softmax(logits), v);                       // (H, T, hd)
    auto merged = reshape(permute(ctx, {1, 0, 2}), {t_len, d});
    return detail::add_bias(matmul(merged, out_w), out_b);
  }

  // cond is the (1, D) flow-step embedding.
  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& cond, int64_t heads, double rope_base,
                    double drop_p = 0.0, Rng* drop_rng = nullptr) const {
    const int64_t d = x.dim(1);
    auto m = detail::add_bias(matmul(silu(cond), mod_w), mod_b);  // (1, 6D)
    auto piece = [&](int64_t i) { return slice(m, 1, i * d, d); };
    auto modulate = [&](const Tensor<S>& h, const Tensor<S>& scale, const Tensor<S>& shift) {
      return add(mul(h, expand(add_scalar(scale, 1.0), h.shape())),
                 expand(shift, h.shape()));
    };

    auto h = modulate(layer_norm(x, kNormEps), piece(1), piece(0));
    auto attn = detail::dropout(attention(h, heads, rope_base), drop_p, drop_rng);
    auto y = add(x, mul(attn, expand(piece(2), x.shape())));

    auto h2 = modulate(layer_norm(y, kNormEps), piece(4), piece(3));
    auto ffn = detail::add_bias(matmul(gelu(detail::add_bias(matmul(h2, fc1_w), fc1_b)), fc2_w),
                                fc2_b);
    ffn = detail::dropout(ffn, drop_p, drop_rng);
    return add(y, mul(ffn, expand(piece(5), y.shape())));
  }

  void for_each_param(const std::string& prefix,
                      const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn(prefix + ".mod_w", mod_w);
    fn(prefix + ".mod_b", mod_b);
    fn(prefix + ".qkv_w", qkv_w);
    fn(prefix + ".qkv_b", qkv_b);
    fn(prefix + ".out_w", out_w);
    fn(prefix + ".out_b", out_b);
    fn(prefix + ".fc1_w", fc1_w);
    fn(prefix + ".fc1_b", fc1_b);
    fn(prefix + ".fc2_w", fc2_w);
    fn(prefix + ".fc2_b", fc2_b);
  }
};

// How conditioning inputs are presented for classifier-free guidance.
enum class CondMode { keep, drop_audio, drop_audio_and_text };

// Captures the residual stream around the transformer stack so tests can
// assert the zero-gate identity without re-deriving internals.
template <class S>
struct ForwardTrace {
  Tensor<S> dit_input;
  Tensor<S> dit_output;
};

template <class S>
struct VectorFieldModel {
  ModelConfig cfg;

  Tensor<S> char_embed;  // (vocab, convnext_dim)
  std::vector<ConvNextBlock<S>> text_blocks;

  Tensor<S> in_proj_w, in_proj_b;  // (2F + convnext_dim, D), (D)
  Tensor<S> pos1_w, pos1_b;        // depthwise (D, 31), (D)
  Tensor<S> pos2_w, pos2_b;
  Tensor<S> time_fc1_w, time_fc1_b, time_fc2_w, time_fc2_b;
  std::vector<DitBlock<S>> dit_blocks;
  Tensor<S> final_norm_g, final_norm_b;
  Tensor<S> out_w, out_b;  // (D, F), (F)

  static constexpr int64_t kPosKernel = 31;

  VectorFieldModel(ModelConfig config, Rng& rng) : cfg(config) {
    cfg.validate();
    const int64_t d = cfg.dit_dim, cd = cfg.convnext_dim, f = cfg.feat_dim;
    char_embed = detail::normal_param<S>({cfg.vocab_size, cd}, rng);
    text_blocks.resize(static_cast<std::size_t>(cfg.convnext_layers));
    for (auto& b : text_blocks) b.init(cd, cfg.convnext_ffn_mult, rng);

    in_proj_w = detail::normal_param<S>({2 * f + cd, d}, rng);
    in_proj_b = detail::const_param<S>({d}, 0.0);
    pos1_w = detail::normal_param<S>({d, kPosKernel}, rng);
    pos1_b = detail::const_param<S>({d}, 0.0);
    pos2_w = detail::normal_param<S>({d, kPosKernel}, rng);
    pos2_b = detail::const_param<S>({d}, 0.0);
    time_fc1_w = detail::normal_param<S>({d, d}, rng);
    time_fc1_b = detail::const_param<S>({d}, 0.0);
    time_fc2_w = detail::normal_param<S>({d, d}, rng);
    time_fc2_b = detail::const_param<S>({d}, 0.0);
    dit_blocks.resize(static_cast<std::size_t>(cfg.dit_layers));
    for (auto& b : dit_blocks) b.init(d, cfg.ffn_mult, rng);
    final_norm_g = detail::const_param<S>({d}, 1.0);
    final_norm_b = detail::const_param<S>({d}, 0.0);
    out_w = detail::normal_param<S>({d, f}, rng);
    out_b = detail::const_param<S>({f}, 0.0);
  }

  // Character ids -> refined text features, shape (len, convnext_dim).
  Tensor<S> refine_text(const ExtendedSequence& z) const {
    if (z.length() > cfg.capacity)
      fail("refine_text: length ", z.length(), " exceeds capacity ", cfg.capacity);
    auto h = add(embedding(char_embed, z.ids), sinusoid_table<S>(z.length(), cfg.convnext_dim));
    for (const auto& b : text_blocks) h = b.forward(h);
    return h;
  }

  // (1, dit_dim) conditioning vector for the flow step.
  Tensor<S> embed_flow_step(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) fail("embed_flow_step: t = ", t, " outside [0, 1]");
    auto h = sinusoid_features<S>(t * kFlowStepScale, cfg.dit_dim);
    h = silu(detail::add_bias(matmul(h, time_fc1_w), time_fc1_b));
    return detail::add_bias(matmul(h, time_fc2_w), time_fc2_b);
  }

  Tensor<S> conv_position(const Tensor<S>& x) const {
    auto h = gelu(conv1d_depthwise(x, pos1_w, &pos1_b));
    h = gelu(conv1d_depthwise(h, pos2_w, &pos2_b));
    return add(x, h);
  }

  // Predicted vector field over the whole sequence, shape (len, feat_dim).
  Tensor<S> forward(const Tensor<S>& noisy, const Tensor<S>& masked_speech,
                    const ExtendedSequence& z, double t, ForwardTrace<S>* trace = nullptr,
                    Rng* drop_rng = nullptr) const {
    detail::check_rank("forward", noisy, 2);
    detail::check_same_shape("forward", noisy, masked_speech);
    if (noisy.dim(1) != cfg.feat_dim)
      fail("forward: feature dim ", noisy.dim(1), " != configured ", cfg.feat_dim);
    if (z.length() != noisy.dim(0))
      fail("forward: text length ", z.length(), " != speech length ", noisy.dim(0));
    if (noisy.dim(0) > cfg.capacity)
      fail("forward: length ", noisy.dim(0), " exceeds capacity ", cfg.capacity);

    auto x = concat<S>({noisy, masked_speech, refine_text(z)}, 1);
    x = detail::add_bias(matmul(x, in_proj_w), in_proj_b);
    x = conv_position(x);
    auto cond = embed_flow_step(t);
    if (trace) trace->dit_input = x;
    for (const auto& b : dit_blocks)
      x = b.forward(x, cond, cfg.heads, cfg.rope_base, cfg.dropout, drop_rng);
    if (trace) trace->dit_output = x;
    x = layer_norm(x, final_norm_g, final_norm_b, 1e-6);
    return detail::add_bias(matmul(x, out_w), out_b);
  }

  void for_each_param(const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn("char_embed", char_embed);
    for (std::size_t i = 0; i < text_blocks.size(); ++i)
      text_blocks[i].for_each_param("text_block" + std::to_string(i), fn);
    fn("in_proj_w", in_proj_w);
    fn("in_proj_b", in_proj_b);
    fn("pos1_w", pos1_w);
    fn("pos1_b", pos1_b);
    fn("pos2_w", pos2_w);
    fn("pos2_b", pos2_b);
    fn("time_fc1_w", time_fc1_w);
    fn("time_fc1_b", time_fc1_b);
    fn("time_fc2_w", time_fc2_w);
    fn("time_fc2_b", time_fc2_b);
    for (std::size_t i = 0; i < dit_blocks.size(); ++i)
      dit_blocks[i].for_each_param("dit_block" + std::to_string(i), fn);
    fn("final_norm_g", final_norm_g);
    fn("final_norm_b", final_norm_b);
    fn("out_w", out_w);
    fn("out_b", out_b);
  }

  int64_t param_count() {
    int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<S>& p) { n += p.numel(); });
    return n;
  }

  void zero_grads() {
    for_each_param([](const std::string&, Tensor<S>& p) { p.zero_grad(); });
  }
};

// The guidance branches differ only in what conditioning they see: the
// unconditional branch zeroes the speech prompt and erases the text.
template <class S>
std::pair<Tensor<S>, ExtendedSequence> drop_conditions(const Tensor<S>& masked_speech,
                                                       const ExtendedSequence& z, CondMode mode,
                                                       int64_t filler_id) {
  switch (mode) {
    case CondMode::keep:
      return {masked_speech, z};
    case CondMode::drop_audio:
      return {Tensor<S>::zeros(masked_speech.shape()), z};
    case CondMode::drop_audio_and_text: {
      ExtendedSequence blank;
      blank.ids.assign(z.ids.size(), filler_id);
      blank.effective_len = 0;
      return {Tensor<S>::zeros(masked_speech.shape()), blank};
    }
  }
  fail("drop_conditions: invalid mode");
}

}  // namespace swayflow

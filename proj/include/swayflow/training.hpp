#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "swayflow/cfm.hpp"
#include "swayflow/common.hpp"
#include "swayflow/corpus.hpp"
#include "swayflow/model.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/tensor.hpp"
#include "swayflow/text.hpp"

namespace swayflow {

// Desk-scale defaults. Full-scale reference values for the same fields:
// peak_lr 7.5e-5, warmup 20k of 1.2M updates, batch 307200 frames — kept
// here only as context for the numbers below.
struct TrainingConfig {
  double peak_lr = 1e-3;
  int64_t warmup_updates = 200;
  int64_t total_updates = 3000;
  int64_t batch_frames = 1024;  // stop adding sequences once this many frames are in
  double mask_ratio_lo = 0.7;
  double mask_ratio_hi = 1.0;
  double cfg_drop_audio = 0.3;  // stage 1: zero the speech prompt
  double cfg_drop_both = 0.2;   // stage 2, applied to stage-1 survivors: also erase text
  double grad_clip_norm = 1.0;
  double ema_decay = 0.999;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  std::string precision = "f32";  // "f32" or "f64"

  void validate() const {
    if (!(peak_lr >= 0.0)) fail("training config: negative peak_lr");
    if (warmup_updates < 0) fail("training config: negative warmup_updates");
    if (total_updates < 1) fail("training config: total_updates must be >= 1");
    if (warmup_updates > total_updates)
      fail("training config: warmup ", warmup_updates, " exceeds total ", total_updates);
    if (batch_frames < 1) fail("training config: batch_frames must be >= 1");
    if (!(0.0 <= mask_ratio_lo && mask_ratio_lo <= mask_ratio_hi && mask_ratio_hi <= 1.0))
      fail("training config: mask ratio range [", mask_ratio_lo, ", ", mask_ratio_hi,
           "] must satisfy 0 <= lo <= hi <= 1");
    if (!(0.0 <= cfg_drop_audio && cfg_drop_audio <= 1.0))
      fail("training config: cfg_drop_audio outside [0, 1]");
    if (!(0.0 <= cfg_drop_both && cfg_drop_both <= 1.0))
      fail("training config: cfg_drop_both outside [0, 1]");
    if (!(grad_clip_norm > 0.0)) fail("training config: grad_clip_norm must be positive");
    if (!(0.0 <= ema_decay && ema_decay <= 1.0)) fail("training config: ema_decay outside [0, 1]");
    if (!(weight_decay >= 0.0)) fail("training config: negative weight_decay");
    if (!(0.0 <= beta1 && beta1 < 1.0) || !(0.0 <= beta2 && beta2 < 1.0))
      fail("training config: betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) fail("training config: adam_eps must be positive");
    if (precision != "f32" && precision != "f64")
      fail("training config: precision must be f32 or f64, got '", precision, "'");
  }
};

// One contiguous span of round(r * len) ones with r ~ U[lo, hi] and a start
// drawn uniformly over the valid offsets. mask == 1 marks frames the model
// must reconstruct. Always draws the ratio first, then the offset.
template <class S>
Tensor<S> make_infilling_mask(int64_t len, Rng& rng, double lo = 0.7, double hi = 1.0) {
  if (len < 1) fail("make_infilling_mask: length ", len, " must be >= 1");
  if (!(0.0 <= lo && lo <= hi && hi <= 1.0))
    fail("make_infilling_mask: ratio range [", lo, ", ", hi, "] invalid");
  const double r = rng.uniform(lo, hi);
  int64_t span = static_cast<int64_t>(std::llround(r * static_cast<double>(len)));
  span = std::min(std::max<int64_t>(span, 1), len);
  const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(len - span + 1)));
  std::vector<S> m(static_cast<std::size_t>(len), S(0));
  for (int64_t i = start; i < start + span; ++i) m[static_cast<std::size_t>(i)] = S(1);
  return Tensor<S>({len}, std::move(m));
}

// Piecewise-linear schedule: 0 at update 0, peak at `warmup`, 0 at `total`.
inline double lr_at(int64_t update, double peak, int64_t warmup, int64_t total) {
  if (total < 1) fail("lr_at: total must be >= 1");
  if (warmup < 0 || warmup > total) fail("lr_at: warmup ", warmup, " outside [0, ", total, "]");
  if (update < 0) fail("lr_at: negative update index");
  if (update >= total) return 0.0;
  if (update < warmup)
    return peak * static_cast<double>(update) / static_cast<double>(warmup);
  return peak * static_cast<double>(total - update) / static_cast<double>(total - warmup);
}

inline double lr_at(int64_t update, const TrainingConfig& cfg) {
  return lr_at(update, cfg.peak_lr, cfg.warmup_updates, cfg.total_updates);
}

// Staged condition dropout: stage 1 zeroes the speech prompt with
// probability `p_drop_audio`; stage 2, drawn only for stage-1 survivors,
// additionally erases the text with probability `p_drop_both`.
inline CondMode draw_cond_mode(Rng& rng, double p_drop_audio, double p_drop_both) {
  if (rng.uniform() < p_drop_audio) return CondMode::drop_audio;
  if (rng.uniform() < p_drop_both) return CondMode::drop_audio_and_text;
  return CondMode::keep;
}

template <class S>
using ParamList = std::vector<std::pair<std::string, Tensor<S>*>>;

template <class S>
ParamList<S> collect_params(VectorFieldModel<S>& model) {
  ParamList<S> out;
  model.for_each_param([&](const std::string& name, Tensor<S>& p) { out.emplace_back(name, &p); });
  return out;
}

// Scales all gradients so the global L2 norm is at most `max_norm`.
// Returns the pre-clip norm; gradients below the bound pass through
// untouched. Parameters that never received a gradient count as zero.
template <class S>
double clip_gradients(const ParamList<S>& params, double max_norm) {
  if (!(max_norm > 0.0)) fail("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p->has_grad()) continue;
    for (S g : p->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p->has_grad()) continue;
      for (S& g : p->impl()->grad) g = static_cast<S>(static_cast<double>(g) * scale);
    }
  }
  return norm;
}

// Adaptive moment estimation with decoupled weight decay. Moments are kept
// in double regardless of the parameter scalar type and are addressed by
// parameter name so they can be checkpointed.
template <class S>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m, v;

  void step(const ParamList<S>& params, double lr) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (const auto& [name, p] : params) {
      auto& pm = moment(m, name, p->numel());
      auto& pv = moment(v, name, p->numel());
      auto& value = p->mutable_data();
      const bool has_grad = p->has_grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = has_grad ? static_cast<double>(p->grad()[i]) : 0.0;
        pm[i] = beta1 * pm[i] + (1.0 - beta1) * g;
        pv[i] = beta2 * pv[i] + (1.0 - beta2) * g * g;
        const double update = (pm[i] / bc1) / (std::sqrt(pv[i] / bc2) + eps);
        value[i] = static_cast<S>(static_cast<double>(value[i]) -
                                  lr * (update + weight_decay * static_cast<double>(value[i])));
      }
    }
  }

 private:
  static std::vector<double>& moment(std::map<std::string, std::vector<double>>& table,
                                     const std::string& name, int64_t n) {
    auto it = table.find(name);
    if (it == table.end())
      it = table.emplace(name, std::vector<double>(static_cast<std::size_t>(n), 0.0)).first;
    else if (it->second.size() != static_cast<std::size_t>(n))
      fail("optimizer moment for '", name, "' has ", it->second.size(), " entries, parameter has ",
           n);
    return it->second;
  }
};

// Exponential moving average of the parameters: shadow <- decay * shadow +
// (1 - decay) * params after every update. The shadow is what inference
// should load.
template <class S>
struct EmaShadow {
  double decay = 0.999;
  std::map<std::string, std::vector<double>> shadow;

  void init(const ParamList<S>& params) {
    shadow.clear();
    for (const auto& [name, p] : params)
      shadow.emplace(name, std::vector<double>(p->data().begin(), p->data().end()));
  }

  void update(const ParamList<S>& params) {
    if (shadow.empty()) fail("ema update before init");
    for (const auto& [name, p] : params) {
      auto& s = entry(name, p->numel());
      for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = decay * s[i] + (1.0 - decay) * static_cast<double>(p->data()[i]);
    }
  }

  // Overwrites the live parameters with the shadow values.
  void copy_to(const ParamList<S>& params) const {
    for (const auto& [name, p] : params) {
      auto it = shadow.find(name);
      if (it == shadow.end()) fail("ema shadow missing parameter '", name, "'");
      if (it->second.size() != static_cast<std::size_t>(p->numel()))
        fail("ema shadow for '", name, "' has ", it->second.size(), " entries, parameter has ",
             p->numel());
      auto& value = p->mutable_data();
      for (std::size_t i = 0; i < value.size(); ++i) value[i] = static_cast<S>(it->second[i]);
    }
  }

 private:
  std::vector<double>& entry(const std::string& name, int64_t n) {
    auto it = shadow.find(name);
    if (it == shadow.end()) fail("ema shadow missing parameter '", name, "'");
    if (it->second.size() != static_cast<std::size_t>(n))
      fail("ema shadow for '", name, "' has ", it->second.size(), " entries, parameter has ", n);
    return it->second;
  }
};

template <class S>
struct BatchExample {
  std::size_t corpus_index = 0;
  Tensor<S> x1;         // clean-ish features (len, F), gradient-free leaf
  ExtendedSequence z;   // character ids padded to len
  Tensor<S> mask;       // (len,) binary; 1 = reconstruct this frame
};

template <class S>
struct TrainingBatch {
  std::vector<BatchExample<S>> examples;
  int64_t total_frames = 0;
};

struct TrainStats {
  int64_t update = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
  int64_t frames = 0;
  int64_t examples = 0;
};

// Owns the full training loop: batch assembly, the masked flow-matching
// objective with staged condition dropout, clipping, the optimizer, and the
// EMA shadow. All randomness flows through one serialized stream in a fixed
// order: example indices, then per-example mask, then per-example
// (t, x0, dropout decisions) during the loss pass.
template <class S>
class Trainer {
 public:
  Trainer(VectorFieldModel<S>& model, const Corpus& corpus, TrainingConfig config)
      : model_(model), cfg_(std::move(config)), rng_(cfg_.seed), params_(collect_params(model)),
        vocab_(load_corpus_vocab(corpus.dir)) {
    cfg_.validate();
    if (corpus.entries.empty()) fail("trainer: corpus has no entries");
    features_.reserve(corpus.entries.size());
    tokens_.reserve(corpus.entries.size());
    for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
      auto feats = corpus.features_of(i);
      if (feats.dim(1) != model.cfg.feat_dim)
        fail("trainer: corpus feature dim ", feats.dim(1), " != model feature dim ",
             model.cfg.feat_dim);
      if (feats.dim(0) > model.cfg.capacity)
        fail("trainer: entry ", corpus.entries[i].id, " has ", feats.dim(0),
             " frames, over capacity ", model.cfg.capacity);
      std::vector<S> values(feats.data().begin(), feats.data().end());
      features_.emplace_back(feats.shape(), std::move(values));
      tokens_.push_back(tokenize(corpus.entries[i].text, vocab_));
    }
    opt_.beta1 = cfg_.beta1;
    opt_.beta2 = cfg_.beta2;
    opt_.eps = cfg_.adam_eps;
    opt_.weight_decay = cfg_.weight_decay;
    ema_.decay = cfg_.ema_decay;
    ema_.init(params_);
  }

  // Draws sequences until the frame budget is reached (always at least one).
  TrainingBatch<S> sample_batch() {
    TrainingBatch<S> batch;
    std::vector<std::size_t> picks;
    int64_t frames = 0;
    while (frames < cfg_.batch_frames) {
      const auto idx = static_cast<std::size_t>(rng_.below(features_.size()));
      picks.push_back(idx);
      frames += features_[idx].dim(0);
    }
    for (auto idx : picks) {
      BatchExample<S> ex;
      ex.corpus_index = idx;
      ex.x1 = features_[idx];
      const int64_t len = ex.x1.dim(0);
      ex.z = pad_to_length(tokens_[idx], len, vocab_);
      ex.mask = make_infilling_mask<S>(len, rng_, cfg_.mask_ratio_lo, cfg_.mask_ratio_hi);
      batch.examples.push_back(std::move(ex));
    }
    batch.total_frames = frames;
    return batch;
  }

  CondMode draw_cond_mode() {
    return swayflow::draw_cond_mode(rng_, cfg_.cfg_drop_audio, cfg_.cfg_drop_both);
  }

  TrainStats step() { return step(sample_batch()); }

  TrainStats step(const TrainingBatch<S>& batch) {
    if (batch.examples.empty()) fail("train step: empty batch");
    // Schedule sampled at one-based update numbers so the first step is live;
    // past total_updates the schedule holds at zero.
    const double lr = lr_at(update_count_ + 1, cfg_);
    model_.zero_grads();
    double loss_value = 0.0;
    {
      Graph<S> graph;
      Tensor<S> total;
      bool first = true;
      for (const auto& ex : batch.examples) {
        const double t = sample_training_step(rng_);
        const auto x0 = sample_noise<S>(ex.x1.shape(), rng_);
        const CondMode mode = draw_cond_mode();

        const auto xt = ot_interpolate(x0, ex.x1, t);
        const auto masked_speech = prompt_part(ex.x1, ex.mask);
        auto [speech_cond, z_cond] =
            drop_conditions(masked_speech, ex.z, mode, Vocabulary::kFillerId);
        const auto v = model_.forward(xt, speech_cond, z_cond, t, nullptr, &rng_);
        const auto target = sub(ex.x1, x0);
        const auto loss = cfm_loss(v, target, ex.mask);
        total = first ? loss : add(total, loss);
        first = false;
      }
      total = mul_scalar(total, 1.0 / static_cast<double>(batch.examples.size()));
      loss_value = total.item();
      graph.backward(total);
    }
    const double grad_norm = clip_gradients(params_, cfg_.grad_clip_norm);
    if (!std::isfinite(loss_value) || !std::isfinite(grad_norm))
      fail("training diverged at update ", update_count_, ": loss ", loss_value, ", grad norm ",
           grad_norm, ", lr ", lr);
    opt_.step(params_, lr);
    ema_.update(params_);

    TrainStats stats;
    stats.update = update_count_;
    stats.loss = loss_value;
    stats.lr = lr;
    stats.grad_norm = grad_norm;
    stats.frames = batch.total_frames;
    stats.examples = static_cast<int64_t>(batch.examples.size());
    ++update_count_;
    return stats;
  }

  // Speech prompt the model conditions on: clean features outside the
  // reconstruction span, zeros inside it.
  static Tensor<S> prompt_part(const Tensor<S>& x1, const Tensor<S>& mask) {
    const int64_t len = x1.dim(0), f = x1.dim(1);
    std::vector<S> out(x1.data());
    for (int64_t i = 0; i < len; ++i)
      if (mask.data()[static_cast<std::size_t>(i)] != S(0))
        for (int64_t c = 0; c < f; ++c) out[static_cast<std::size_t>(i * f + c)] = S(0);
    return Tensor<S>(x1.shape(), std::move(out));
  }

  VectorFieldModel<S>& model() { return model_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TrainingConfig& config() const { return cfg_; }
  const ParamList<S>& params() const { return params_; }
  int64_t update_count() const { return update_count_; }
  void set_update_count(int64_t n) { update_count_ = n; }
  Rng& rng() { return rng_; }
  AdamW<S>& optimizer() { return opt_; }
  EmaShadow<S>& ema() { return ema_; }

 private:
  VectorFieldModel<S>& model_;
  TrainingConfig cfg_;
  Rng rng_;
  ParamList<S> params_;
  Vocabulary vocab_;
  std::vector<Tensor<S>> features_;
  std::vector<std::vector<int64_t>> tokens_;
  AdamW<S> opt_;
  EmaShadow<S> ema_;
  int64_t update_count_ = 0;
};

}  // namespace swayflow

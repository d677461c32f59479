#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "swayflow/cfm.hpp"
#include "swayflow/common.hpp"
#include "swayflow/model.hpp"
#include "swayflow/sampler.hpp"
#include "swayflow/tensor.hpp"
#include "swayflow/text.hpp"

namespace swayflow {

template <class S>
struct InferenceRequest {
  std::string prompt_text;    // transcript of the prompt features
  std::string gen_text;       // text to synthesize after the prompt
  Tensor<S> prompt_features;  // (P, F); empty tensor for no prompt
  int64_t gen_frames = 0;     // 0 -> estimate from the character-count ratio
  int64_t nfe = 32;
  Solver solver = Solver::euler;
  double sway = -1.0;
  double cfg_alpha = 2.0;
  uint64_t seed = 0;
};

template <class S>
struct InferenceResult {
  Tensor<S> features;  // generated region only, (G, F)
  int64_t evals = 0;   // realized vector-field passes, guidance included
  int64_t prompt_frames = 0;
  int64_t gen_frames = 0;
};

// Conditional branch sees the speech prompt and the text; the unconditional
// branch sees zeros and an all-filler sequence.
template <class S>
VectorField<S> guidance_fields(const VectorFieldModel<S>& model, const Tensor<S>& masked_speech,
                               const ExtendedSequence& z) {
  auto dropped = drop_conditions(masked_speech, z, CondMode::drop_audio_and_text,
                                 Vocabulary::kFillerId);
  VectorField<S> vf;
  vf.conditional = [&model, masked_speech, z](const Tensor<S>& x, double t) {
    return model.forward(x, masked_speech, z, t);
  };
  vf.unconditional = [&model, speech = std::move(dropped.first),
                      blank = std::move(dropped.second)](const Tensor<S>& x, double t) {
    return model.forward(x, speech, blank, t);
  };
  return vf;
}

namespace detail {

template <class S>
struct InferencePlan {
  int64_t prompt_frames = 0;
  int64_t gen_frames = 0;
  int64_t total_frames = 0;
  Tensor<S> masked_speech;  // prompt rows, zeros over the region to generate
  ExtendedSequence z;
  FlowSchedule schedule;
  Tensor<S> x0;
};

template <class S>
InferencePlan<S> plan_inference(const VectorFieldModel<S>& model, const Vocabulary& vocab,
                                const InferenceRequest<S>& req) {
  InferencePlan<S> plan;
  const int64_t f = model.cfg.feat_dim;
  const bool has_prompt = req.prompt_features.numel() > 0;
  if (has_prompt) {
    check_rank("infer", req.prompt_features, 2);
    if (req.prompt_features.dim(1) != f)
      fail("infer: prompt feature dim ", req.prompt_features.dim(1), " != model feature dim ", f);
    plan.prompt_frames = req.prompt_features.dim(0);
  }
  if (req.prompt_text.empty() != !has_prompt)
    fail("infer: prompt text and prompt features must be given together");
  if (req.gen_text.empty()) fail("infer: empty generation text");

  auto ids = tokenize(req.prompt_text, vocab);
  const auto gen_ids = tokenize(req.gen_text, vocab);
  ids.insert(ids.end(), gen_ids.begin(), gen_ids.end());

  plan.gen_frames = req.gen_frames;
  if (plan.gen_frames == 0) {
    if (!has_prompt) fail("infer: need either a prompt or an explicit duration");
    plan.gen_frames = estimate_duration(plan.prompt_frames,
                                        static_cast<int64_t>(ids.size() - gen_ids.size()),
                                        static_cast<int64_t>(gen_ids.size())) -
                      plan.prompt_frames;
  }
  if (plan.gen_frames < 1) fail("infer: generated region needs at least one frame");
  plan.total_frames = plan.prompt_frames + plan.gen_frames;
  if (plan.total_frames > model.cfg.capacity)
    fail("infer: ", plan.total_frames, " frames exceed model capacity ", model.cfg.capacity);
  plan.z = pad_to_length(ids, plan.total_frames, vocab);

  std::vector<S> masked(static_cast<std::size_t>(plan.total_frames * f), S(0));
  if (has_prompt)
    std::copy(req.prompt_features.data().begin(), req.prompt_features.data().end(),
              masked.begin());
  plan.masked_speech = Tensor<S>({plan.total_frames, f}, std::move(masked));

  plan.schedule = build_schedule(req.nfe, req.sway, req.solver, req.cfg_alpha);
  Rng rng(req.seed);
  plan.x0 = sample_noise<S>({plan.total_frames, f}, rng);
  return plan;
}

template <class S>
InferenceResult<S> finish_inference(const InferencePlan<S>& plan, IntegrateResult<S> integrated) {
  InferenceResult<S> out;
  out.features =
      slice(integrated.state, 0, plan.prompt_frames, plan.gen_frames).clone();
  out.evals = integrated.evals;
  out.prompt_frames = plan.prompt_frames;
  out.gen_frames = plan.gen_frames;
  return out;
}

}  // namespace detail

// Infilling inference: integrate the guided field from noise across
// prompt+generation frames, then return only the generated region.
template <class S>
InferenceResult<S> infer(const VectorFieldModel<S>& model, const Vocabulary& vocab,
                         const InferenceRequest<S>& req) {
  auto plan = detail::plan_inference(model, vocab, req);
  auto vf = guidance_fields(model, plan.masked_speech, plan.z);
  return detail::finish_inference(plan, integrate(vf, plan.x0, plan.schedule));
}

// Cyclically tiles (or crops) rows so the block covers exactly `frames` rows.
template <class S>
Tensor<S> tile_rows(const Tensor<S>& block, int64_t frames) {
  detail::check_rank("tile_rows", block, 2);
  if (block.dim(0) < 1) fail("tile_rows: no rows to tile");
  if (frames < 1) fail("tile_rows: target frame count must be positive");
  const int64_t rows = block.dim(0), cols = block.dim(1);
  std::vector<S> v(static_cast<std::size_t>(frames * cols));
  for (int64_t i = 0; i < frames; ++i)
    for (int64_t c = 0; c < cols; ++c)
      v[static_cast<std::size_t>(i * cols + c)] =
          block.data()[static_cast<std::size_t>((i % rows) * cols + c)];
  return Tensor<S>({frames, cols}, std::move(v));
}

// Diagnostic inference that starts the walk from a partially leaked state:
// x(t') = (1 - t') x0 + t' x_leak over the generated region (the prompt rows
// of the leak equal the prompt), then integrates the full schedule
// compressed onto [t', 1], preserving its density profile and step budget.
template <class S>
InferenceResult<S> infer_with_leak(const VectorFieldModel<S>& model, const Vocabulary& vocab,
                                   const InferenceRequest<S>& req, const Tensor<S>& leak_features,
                                   double t_prime = 0.1) {
  auto plan = detail::plan_inference(model, vocab, req);
  const int64_t f = model.cfg.feat_dim;
  detail::check_rank("infer_with_leak", leak_features, 2);
  if (leak_features.dim(1) != f)
    fail("infer_with_leak: leak feature dim ", leak_features.dim(1), " != model feature dim ", f);

  const auto gen_leak = tile_rows(leak_features, plan.gen_frames);
  std::vector<S> leak(static_cast<std::size_t>(plan.total_frames * f));
  if (plan.prompt_frames > 0)
    std::copy(req.prompt_features.data().begin(), req.prompt_features.data().end(), leak.begin());
  std::copy(gen_leak.data().begin(), gen_leak.data().end(),
            leak.begin() + static_cast<std::ptrdiff_t>(plan.prompt_frames * f));
  const Tensor<S> x_leak({plan.total_frames, f}, std::move(leak));

  auto vf = guidance_fields(model, plan.masked_speech, plan.z);
  return detail::finish_inference(plan,
                                  leak_and_override(vf, plan.x0, x_leak, t_prime, plan.schedule));
}

}  // namespace swayflow

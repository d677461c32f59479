#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/ops.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {

// Straight-line probe path between a noise draw and a data sample:
// (1 - t) * x0 + t * x1. The regression target along this path is the
// constant displacement x1 - x0.
template <class S>
Tensor<S> ot_interpolate(const Tensor<S>& x0, const Tensor<S>& x1, double t) {
  detail::check_same_shape("ot_interpolate", x0, x1);
  if (!(t >= 0.0 && t <= 1.0)) fail("ot_interpolate: t = ", t, " outside [0, 1]");
  return add(mul_scalar(x0, 1.0 - t), mul_scalar(x1, t));
}

// Flow step drawn uniformly on [0, 1), independently per training example.
inline double sample_training_step(Rng& rng) { return rng.uniform(); }

// Standard normal tensor of the given shape.
template <class S>
Tensor<S> sample_noise(const Shape& shape, Rng& rng) {
  validate_shape(shape);
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal());
  return Tensor<S>(shape, std::move(v));
}

// Mean squared error between the predicted and target vector fields,
// averaged only over positions where mask == 1. `mask` is a binary vector
// over the leading (time) axis; remaining axes are per-frame channels.
template <class S>
Tensor<S> cfm_loss(const Tensor<S>& v_pred, const Tensor<S>& target, const Tensor<S>& mask) {
  detail::check_same_shape("cfm_loss", v_pred, target);
  if (v_pred.rank() < 1) fail("cfm_loss: prediction must have a time axis");
  const int64_t frames = v_pred.dim(0);
  if (mask.numel() != frames)
    fail("cfm_loss: mask has ", mask.numel(), " entries for ", frames, " frames");
  int64_t selected = 0;
  for (S m : mask.data()) {
    if (m != S(0) && m != S(1)) fail("cfm_loss: mask must be binary (0/1)");
    if (m == S(1)) ++selected;
  }
  if (selected == 0) fail("cfm_loss: mask selects no positions");
  const int64_t per_frame = frames > 0 ? v_pred.numel() / frames : 0;

  auto diff = sub(v_pred, target);
  auto sq = mul(diff, diff);
  Shape col_shape(v_pred.rank(), 1);
  col_shape[0] = frames;
  auto mask_e = expand(reshape(mask, col_shape), v_pred.shape());
  auto masked = mul(sq, mask_e);
  return mul_scalar(sum(masked), 1.0 / static_cast<double>(selected * per_frame));
}

}  // namespace swayflow

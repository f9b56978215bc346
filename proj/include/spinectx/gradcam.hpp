#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>

#include "spinectx/network.hpp"
#include "spinectx/tape.hpp"

namespace spinectx {

/// Gradient-weighted activation map over the bottleneck: backpropagates the
/// summed sigmoid probability of the voxels currently predicted foreground
/// (p > 0.5) to the bottleneck activations, weights each channel by its
/// spatial mean gradient, ReLUs the weighted sum, upsamples x8 back to input
/// resolution, and min-max normalizes to [0,1] (an all-zero map stays
/// all-zero, including when nothing is predicted foreground).
template <typename S>
Tensor5<S> grad_cam(SpineContextResUNet<S>& net, const TensorPtr<S>& input,
                    Mode mode = Mode::Infer) {
  Tape<S> tape;
  ForwardOptions<S> opt;
  opt.mode = mode;
  opt.tape = &tape;
  opt.capture_bottleneck = true;
  auto res = net.forward(input, opt);
  if (!res.bottleneck)
    throw std::runtime_error("grad_cam: bottleneck capture is disabled for this forward");

  // d/dlogit of sum_{p>0.5} sigmoid(logit) = p(1-p) on the predicted region.
  auto& logits = *res.logits;
  logits.ensure_grad();
  for (size_t i = 0; i < logits.data.size(); ++i) {
    const double x = static_cast<double>(logits.data[i]);
    const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    logits.grad[i] = p > 0.5 ? static_cast<S>(p * (1.0 - p)) : S(0);
  }
  tape.backward();

  auto& act = *res.bottleneck;
  act.ensure_grad();
  const std::int64_t C = act.shape.c, sp = act.shape.spatial();

  // Channel weights: spatial mean of the gradient.
  Tensor5<S> cam({act.shape.n, 1, act.shape.d, act.shape.h, act.shape.w});
  for (std::int64_t n = 0; n < act.shape.n; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      double sum = 0.0;
      const S* g = act.grad.data() + (n * C + c) * sp;
      for (std::int64_t i = 0; i < sp; ++i) sum += static_cast<double>(g[i]);
      const S alpha = static_cast<S>(sum / static_cast<double>(sp));
      const S* a = act.data.data() + (n * C + c) * sp;
      S* out = cam.data.data() + n * sp;
      for (std::int64_t i = 0; i < sp; ++i) out[i] += alpha * a[i];
    }
  }
  cam.array() = cam.array().max(S(0));

  Tensor5<S> up = cam;
  for (int i = 0; i < 3; ++i) up = trilinear_upsample(up);

  const S max = up.array().maxCoeff();
  const S min = up.array().minCoeff();
  if (max > min)
    up.array() = (up.array() - min) / (max - min);
  else if (max != S(0))
    up.array() = S(1);
  return up;
}

}  // namespace spinectx

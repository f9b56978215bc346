#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>

#include "spinectx/gradcam.hpp"
#include "spinectx/network.hpp"
#include "spinectx/tensor.hpp"
#include "spinectx/volume.hpp"
#include "spinectx/window.hpp"

namespace spinectx {

/// Maps one (1,1,pd,ph,pw) patch to a same-shaped probability patch.
/// The network adapter is sigmoid(forward(x)); test stubs substitute freely.
using PatchPredictor =
    std::function<Tensor5<float>(const Tensor5<float>&, const std::array<std::int64_t, 3>&)>;

/// Weighted-sum / weight-sum pair for patch recombination, accumulated in
/// double. The window floor keeps the weight sum >= 1e-3 at every covered
/// voxel; epsilon only guards voxels no window touched.
struct AccumulatorPair {
  std::vector<double> weighted_sum;
  std::vector<double> weight_sum;
  double epsilon = 1e-12;
};

inline constexpr double kReconEpsilon = 1e-12;

/// Gaussian-weighted sliding-window reconstruction: per patch, predict,
/// multiply by the window weights, accumulate, then normalize by the weight
/// sum plus a small epsilon. Patches are folded in plan order, so the result
/// does not depend on the worker count.
inline Volume sliding_infer(const Volume& vol, const WindowPlan& plan,
                            const PatchPredictor& predict) {
  if (vol.dims != plan.volume_dims)
    throw std::invalid_argument("sliding_infer: volume dims " + vol.dims_str() +
                                " do not match plan");
  const Volume padded = pad_to(vol, plan.patch);
  if (padded.dims != plan.padded_dims)
    throw std::invalid_argument("sliding_infer: padded dims mismatch plan");

  const std::int64_t padded_vox =
      plan.padded_dims[0] * plan.padded_dims[1] * plan.padded_dims[2];
  AccumulatorPair acc{std::vector<double>(static_cast<size_t>(padded_vox), 0.0),
                      std::vector<double>(static_cast<size_t>(padded_vox), 0.0),
                      kReconEpsilon};

  const auto& g = plan.gaussian;
  const auto [pd, ph, pw] = plan.patch;
  auto flat = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    return static_cast<size_t>((z * plan.padded_dims[1] + y) * plan.padded_dims[2] + x);
  };

  Tensor5<float> patch({1, 1, pd, ph, pw});
  for (const auto& start : plan.starts) {
    const auto [sz, sy, sx] = start;
    for (std::int64_t z = 0; z < pd; ++z)
      for (std::int64_t y = 0; y < ph; ++y) {
        const float* src = padded.data.data() + padded.index(sz + z, sy + y, sx);
        float* dst = patch.data.data() + (z * ph + y) * pw;
        std::copy_n(src, pw, dst);
      }
    Tensor5<float> prob = predict(patch, start);
    if (!(prob.shape == patch.shape))
      throw std::invalid_argument("sliding_infer: predictor returned shape " + prob.shape.str() +
                                  " for patch " + patch.shape.str());
    for (std::int64_t z = 0; z < pd; ++z)
      for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x) {
          const double wv = g.at(z, y, x);
          const double pv = prob.data[static_cast<size_t>((z * ph + y) * pw + x)];
          acc.weighted_sum[flat(sz + z, sy + y, sx + x)] += pv * wv;
          acc.weight_sum[flat(sz + z, sy + y, sx + x)] += wv;
        }
  }

  Volume out(plan.padded_dims, padded.spacing, VolumeKind::Probability);
  out.origin = padded.origin;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] =
        static_cast<float>(acc.weighted_sum[i] / (acc.weight_sum[i] + acc.epsilon));
  return crop_to(out, plan.volume_dims);
}

/// Builds the production predictor for a float network: forward in infer mode
/// followed by sigmoid.
template <typename S = float>
PatchPredictor network_predictor(SpineContextResUNet<S>& net) {
  return [&net](const Tensor5<float>& patch, const std::array<std::int64_t, 3>&) {
    auto in = make_tensor<S>(patch.shape);
    for (size_t i = 0; i < patch.data.size(); ++i) in->data[i] = static_cast<S>(patch.data[i]);
    ForwardOptions<S> opt;
    opt.mode = Mode::Infer;
    opt.capture_bottleneck = false;
    auto out = net.forward(in, opt);
    Tensor5<S> p = sigmoid(*out.logits);
    Tensor5<float> r(patch.shape);
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<float>(p.data[i]);
    return r;
  };
}

/// Per-patch Grad-CAM maps recombined with the same Gaussian weighting.
template <typename S = float>
Volume sliding_gradcam(SpineContextResUNet<S>& net, const Volume& vol, const WindowPlan& plan) {
  auto predict = [&net](const Tensor5<float>& patch, const std::array<std::int64_t, 3>&) {
    auto in = make_tensor<S>(patch.shape);
    for (size_t i = 0; i < patch.data.size(); ++i) in->data[i] = static_cast<S>(patch.data[i]);
    Tensor5<S> cam = grad_cam(net, in);
    Tensor5<float> r(patch.shape);
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<float>(cam.data[i]);
    return r;
  };
  Volume out = sliding_infer(vol, plan, predict);
  for (float& f : out.data) f = std::min(1.0f, std::max(0.0f, f));
  return out;
}

}  // namespace spinectx

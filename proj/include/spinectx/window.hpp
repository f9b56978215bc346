#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "spinectx/volume.hpp"

namespace spinectx {

/// Separable Gaussian importance weights for one patch: per-axis sigma =
/// dim/8, centered at (dim-1)/2, peak normalized to 1, and floored at 1e-3 of
/// the peak so every weight stays strictly positive.
struct GaussianWindow {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::vector<float> weights;  // row-major (d,h,w)

  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return weights[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
  }
};

inline constexpr double kGaussianFloor = 1e-3;

inline GaussianWindow gaussian_window(const std::array<std::int64_t, 3>& patch) {
  for (auto d : patch)
    if (d <= 0) throw std::invalid_argument("gaussian_window: non-positive patch dim");
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t n = patch[static_cast<size_t>(a)];
    const double sigma = static_cast<double>(n) / 8.0;
    const double center = static_cast<double>(n - 1) / 2.0;
    axis[static_cast<size_t>(a)].resize(static_cast<size_t>(n));
    double mx = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double t = (static_cast<double>(i) - center) / sigma;
      const double v = std::exp(-0.5 * t * t);
      axis[static_cast<size_t>(a)][static_cast<size_t>(i)] = v;
      mx = std::max(mx, v);
    }
    for (auto& v : axis[static_cast<size_t>(a)]) v /= mx;
  }
  GaussianWindow w;
  w.dims = patch;
  w.weights.resize(static_cast<size_t>(patch[0] * patch[1] * patch[2]));
  size_t o = 0;
  for (std::int64_t z = 0; z < patch[0]; ++z)
    for (std::int64_t y = 0; y < patch[1]; ++y)
      for (std::int64_t x = 0; x < patch[2]; ++x) {
        const double v = axis[0][static_cast<size_t>(z)] * axis[1][static_cast<size_t>(y)] *
                         axis[2][static_cast<size_t>(x)];
        w.weights[o++] = static_cast<float>(std::max(v, kGaussianFloor));
      }
  return w;
}

/// Tiling of a volume into half-overlapping patches. Volumes smaller than the
/// patch are padded up to patch size first (pad recorded in padded_dims); the
/// caller crops the final output back.
struct WindowPlan {
  std::array<std::int64_t, 3> volume_dims{0, 0, 0};  // original dims
  std::array<std::int64_t, 3> padded_dims{0, 0, 0};  // >= patch on every axis
  std::array<std::int64_t, 3> patch{0, 0, 0};
  std::array<std::int64_t, 3> stride{0, 0, 0};
  std::vector<std::array<std::int64_t, 3>> starts;  // ordered (z,y,x) offsets
  GaussianWindow gaussian;

  std::int64_t count() const { return static_cast<std::int64_t>(starts.size()); }
};

namespace detail {

/// Per axis: {0, s, 2s, ...} with the final start clamped to L-P, dedup.
inline std::vector<std::int64_t> axis_starts(std::int64_t length, std::int64_t patch,
                                             std::int64_t stride) {
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0;; ++i) {
    std::int64_t s = std::min(i * stride, length - patch);
    if (!out.empty() && s <= out.back()) break;
    out.push_back(s);
    if (s == length - patch) break;
  }
  return out;
}

}  // namespace detail

inline WindowPlan plan_windows(const std::array<std::int64_t, 3>& volume_dims,
                               const std::array<std::int64_t, 3>& patch) {
  for (auto p : patch)
    if (p <= 0) throw std::invalid_argument("plan_windows: non-positive patch dim");
  for (auto d : volume_dims)
    if (d <= 0) throw std::invalid_argument("plan_windows: non-positive volume dim");
  WindowPlan plan;
  plan.volume_dims = volume_dims;
  plan.patch = patch;
  for (int a = 0; a < 3; ++a) {
    plan.padded_dims[a] = std::max(volume_dims[a], patch[a]);
    plan.stride[a] = std::max<std::int64_t>(1, patch[a] / 2);
  }
  const auto zs = detail::axis_starts(plan.padded_dims[0], patch[0], plan.stride[0]);
  const auto ys = detail::axis_starts(plan.padded_dims[1], patch[1], plan.stride[1]);
  const auto xs = detail::axis_starts(plan.padded_dims[2], patch[2], plan.stride[2]);
  for (auto z : zs)
    for (auto y : ys)
      for (auto x : xs) plan.starts.push_back({z, y, x});
  plan.gaussian = gaussian_window(patch);
  return plan;
}

}  // namespace spinectx

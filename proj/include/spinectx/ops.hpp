#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "spinectx/tensor.hpp"

namespace spinectx {

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

template <typename S>
Tensor5<S> relu(const Tensor5<S>& x) {
  Tensor5<S> y(x.shape);
  y.array() = x.array().max(S(0));
  return y;
}

/// Masks grad where the forward input was <= 0 (gradient at exactly 0 is 0).
template <typename S>
void relu_backward_acc(const Tensor5<S>& gy, const Tensor5<S>& x, S* dx) {
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i)
    if (x.data[static_cast<size_t>(i)] > S(0)) dx[i] += gy.data[static_cast<size_t>(i)];
}

// ---------------------------------------------------------------------------
// Sigmoid
// ---------------------------------------------------------------------------

template <typename S>
Tensor5<S> sigmoid(const Tensor5<S>& x) {
  Tensor5<S> y(x.shape);
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.data[static_cast<size_t>(i)];
    y.data[static_cast<size_t>(i)] =
        v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  }
  return y;
}

template <typename S>
void sigmoid_backward_acc(const Tensor5<S>& gy, const Tensor5<S>& y, S* dx) {
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S p = y.data[static_cast<size_t>(i)];
    dx[i] += gy.data[static_cast<size_t>(i)] * p * (S(1) - p);
  }
}

// ---------------------------------------------------------------------------
// Max pooling 2x2x2
// ---------------------------------------------------------------------------

template <typename S>
struct MaxPoolResult {
  Tensor5<S> output;
  std::vector<std::int64_t> argmax;  // flat index into the input, per output voxel
};

/// 2x2x2 max pooling; ties broken by lowest flat index so the backward
/// routing is deterministic.
template <typename S>
MaxPoolResult<S> maxpool3d(const Tensor5<S>& x) {
  const Shape5& s = x.shape;
  for (auto [dim, name] : {std::pair{s.d, 'd'}, std::pair{s.h, 'h'}, std::pair{s.w, 'w'}})
    if (dim % 2 != 0)
      throw std::invalid_argument(std::string("maxpool3d: spatial dim ") + name + "=" +
                                  std::to_string(dim) + " not divisible by 2 in " + s.str());

  MaxPoolResult<S> r{Tensor5<S>({s.n, s.c, s.d / 2, s.h / 2, s.w / 2}), {}};
  r.argmax.resize(static_cast<size_t>(r.output.numel()));
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t z = 0; z < s.d; z += 2)
        for (std::int64_t y = 0; y < s.h; y += 2)
          for (std::int64_t xw = 0; xw < s.w; xw += 2) {
            S best = x.at(n, c, z, y, xw);
            std::int64_t best_idx = x.index(n, c, z, y, xw);
            for (std::int64_t kz = 0; kz < 2; ++kz)
              for (std::int64_t ky = 0; ky < 2; ++ky)
                for (std::int64_t kx = 0; kx < 2; ++kx) {
                  const S v = x.at(n, c, z + kz, y + ky, xw + kx);
                  if (v > best) {
                    best = v;
                    best_idx = x.index(n, c, z + kz, y + ky, xw + kx);
                  }
                }
            r.output.data[static_cast<size_t>(o)] = best;
            r.argmax[static_cast<size_t>(o)] = best_idx;
            ++o;
          }
  return r;
}

template <typename S>
void maxpool3d_backward_acc(const Tensor5<S>& gy, const std::vector<std::int64_t>& argmax,
                            S* dx) {
  if (argmax.size() != static_cast<size_t>(gy.numel()))
    throw std::invalid_argument("maxpool3d_backward: argmax record does not match grad_out");
  for (size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += gy.data[i];
}

// ---------------------------------------------------------------------------
// Trilinear upsampling, factor 2, align-corners=false
// ---------------------------------------------------------------------------

namespace detail {

/// Sample centers at (i+0.5)/2 - 0.5, edge-clamped. Returns (i0, frac).
inline std::pair<std::int64_t, double> up2_coord(std::int64_t i) {
  const double x = 0.5 * static_cast<double>(i) - 0.25;
  const double f = std::floor(x);
  return {static_cast<std::int64_t>(f), x - f};
}

inline std::int64_t clamp_idx(std::int64_t i, std::int64_t n) {
  return std::min(std::max<std::int64_t>(i, 0), n - 1);
}

}  // namespace detail

/// Doubles each spatial dimension. Constant fields map to constant fields.
template <typename S>
Tensor5<S> trilinear_upsample(const Tensor5<S>& x) {
  const Shape5& s = x.shape;
  Tensor5<S> y({s.n, s.c, s.d * 2, s.h * 2, s.w * 2});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t oz = 0; oz < y.shape.d; ++oz) {
        auto [z0, fz] = detail::up2_coord(oz);
        const std::int64_t za = detail::clamp_idx(z0, s.d), zb = detail::clamp_idx(z0 + 1, s.d);
        for (std::int64_t oy = 0; oy < y.shape.h; ++oy) {
          auto [y0, fy] = detail::up2_coord(oy);
          const std::int64_t ya = detail::clamp_idx(y0, s.h), yb = detail::clamp_idx(y0 + 1, s.h);
          for (std::int64_t ox = 0; ox < y.shape.w; ++ox) {
            auto [x0, fx] = detail::up2_coord(ox);
            const std::int64_t xa = detail::clamp_idx(x0, s.w), xb =
                detail::clamp_idx(x0 + 1, s.w);
            const double c00 = (1 - fz) * (1 - fy), c01 = (1 - fz) * fy, c10 = fz * (1 - fy),
                         c11 = fz * fy;
            const double v =
                c00 * ((1 - fx) * x.at(n, c, za, ya, xa) + fx * x.at(n, c, za, ya, xb)) +
                c01 * ((1 - fx) * x.at(n, c, za, yb, xa) + fx * x.at(n, c, za, yb, xb)) +
                c10 * ((1 - fx) * x.at(n, c, zb, ya, xa) + fx * x.at(n, c, zb, ya, xb)) +
                c11 * ((1 - fx) * x.at(n, c, zb, yb, xa) + fx * x.at(n, c, zb, yb, xb));
            y.at(n, c, oz, oy, ox) = static_cast<S>(v);
          }
        }
      }
  return y;
}

/// Exact adjoint (transpose) of the forward linear map.
template <typename S>
void trilinear_upsample_backward_acc(const Tensor5<S>& gy, const Shape5& xshape, S* dx) {
  const Shape5& s = xshape;
  if (gy.shape.d != s.d * 2 || gy.shape.h != s.h * 2 || gy.shape.w != s.w * 2 ||
      gy.shape.n != s.n || gy.shape.c != s.c)
    throw std::invalid_argument("trilinear_upsample_backward: grad shape " + gy.shape.str() +
                                " is not 2x of input " + s.str());
  auto idx = [&](std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return (((n * s.c + c) * s.d + z) * s.h + y) * s.w + x;
  };
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t oz = 0; oz < gy.shape.d; ++oz) {
        auto [z0, fz] = detail::up2_coord(oz);
        const std::int64_t za = detail::clamp_idx(z0, s.d), zb = detail::clamp_idx(z0 + 1, s.d);
        for (std::int64_t oy = 0; oy < gy.shape.h; ++oy) {
          auto [y0, fy] = detail::up2_coord(oy);
          const std::int64_t ya = detail::clamp_idx(y0, s.h), yb = detail::clamp_idx(y0 + 1, s.h);
          for (std::int64_t ox = 0; ox < gy.shape.w; ++ox) {
            auto [x0, fx] = detail::up2_coord(ox);
            const std::int64_t xa = detail::clamp_idx(x0, s.w), xb =
                detail::clamp_idx(x0 + 1, s.w);
            const double g = static_cast<double>(gy.at(n, c, oz, oy, ox));
            dx[idx(n, c, za, ya, xa)] += static_cast<S>(g * (1 - fz) * (1 - fy) * (1 - fx));
            dx[idx(n, c, za, ya, xb)] += static_cast<S>(g * (1 - fz) * (1 - fy) * fx);
            dx[idx(n, c, za, yb, xa)] += static_cast<S>(g * (1 - fz) * fy * (1 - fx));
            dx[idx(n, c, za, yb, xb)] += static_cast<S>(g * (1 - fz) * fy * fx);
            dx[idx(n, c, zb, ya, xa)] += static_cast<S>(g * fz * (1 - fy) * (1 - fx));
            dx[idx(n, c, zb, ya, xb)] += static_cast<S>(g * fz * (1 - fy) * fx);
            dx[idx(n, c, zb, yb, xa)] += static_cast<S>(g * fz * fy * (1 - fx));
            dx[idx(n, c, zb, yb, xb)] += static_cast<S>(g * fz * fy * fx);
          }
        }
      }
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

template <typename S>
Tensor5<S> concat_channels(const std::vector<const Tensor5<S>*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape5& a = parts[0]->shape;
  std::int64_t c_total = 0;
  for (const auto* p : parts) {
    if (p->shape.n != a.n || !p->shape.same_spatial(a))
      throw std::invalid_argument("concat_channels: shape " + p->shape.str() +
                                  " incompatible with " + a.str());
    c_total += p->shape.c;
  }
  Tensor5<S> y({a.n, c_total, a.d, a.h, a.w});
  const std::int64_t sp = a.spatial();
  for (std::int64_t n = 0; n < a.n; ++n) {
    std::int64_t c_off = 0;
    for (const auto* p : parts) {
      const std::int64_t pc = p->shape.c;
      std::copy_n(p->data.data() + n * pc * sp, pc * sp,
                  y.data.data() + (n * c_total + c_off) * sp);
      c_off += pc;
    }
  }
  return y;
}

template <typename S>
Tensor5<S> concat_channels(const Tensor5<S>& a, const Tensor5<S>& b) {
  return concat_channels<S>({&a, &b});
}

/// Splits grad back by the recorded channel offsets; accumulates into each dx.
template <typename S>
void concat_channels_backward_acc(const Tensor5<S>& gy, const std::vector<Shape5>& in_shapes,
                                  const std::vector<S*>& dxs) {
  const std::int64_t sp = gy.shape.spatial();
  for (std::int64_t n = 0; n < gy.shape.n; ++n) {
    std::int64_t c_off = 0;
    for (size_t i = 0; i < in_shapes.size(); ++i) {
      const std::int64_t pc = in_shapes[i].c;
      const S* src = gy.data.data() + (n * gy.shape.c + c_off) * sp;
      S* dst = dxs[i] + n * pc * sp;
      for (std::int64_t k = 0; k < pc * sp; ++k) dst[k] += src[k];
      c_off += pc;
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise sum (residual shortcut)
// ---------------------------------------------------------------------------

template <typename S>
Tensor5<S> add(const Tensor5<S>& a, const Tensor5<S>& b) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("add: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
  Tensor5<S> y(a.shape);
  y.array() = a.array() + b.array();
  return y;
}

template <typename S>
void add_backward_acc(const Tensor5<S>& gy, S* da, S* db) {
  for (std::int64_t i = 0; i < gy.numel(); ++i) {
    const S g = gy.data[static_cast<size_t>(i)];
    da[i] += g;
    db[i] += g;
  }
}

}  // namespace spinectx

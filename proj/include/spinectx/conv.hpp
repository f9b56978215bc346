#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>

#include "spinectx/parallel.hpp"
#include "spinectx/tensor.hpp"

namespace spinectx {

/// Span of voxels a dilated kernel touches along one axis: (K-1)*r + 1.
inline std::int64_t kernel_extent(std::int64_t k, std::int64_t r) { return (k - 1) * r + 1; }

/// Geometry of one 3-D convolution. Stride is fixed at 1; "same" spatial
/// shape holds iff padding = r*(K-1)/2 with odd K.
struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::array<std::int64_t, 3> kernel{3, 3, 3};
  std::array<std::int64_t, 3> dilation{1, 1, 1};
  std::array<std::int64_t, 3> padding{0, 0, 0};
  std::array<std::int64_t, 3> stride{1, 1, 1};
  bool has_bias = false;

  /// Spatially-preserving spec for odd K: padding = r*(K-1)/2 on every axis.
  static ConvSpec same(std::int64_t in_c, std::int64_t out_c, std::int64_t k, std::int64_t r,
                       bool bias = false) {
    ConvSpec s;
    s.in_channels = in_c;
    s.out_channels = out_c;
    s.kernel = {k, k, k};
    s.dilation = {r, r, r};
    s.padding = {r * (k - 1) / 2, r * (k - 1) / 2, r * (k - 1) / 2};
    s.has_bias = bias;
    return s;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dilation[a] <= 0)
        throw std::invalid_argument("ConvSpec: non-positive dilation " +
                                    std::to_string(dilation[a]));
      if (kernel[a] <= 0) throw std::invalid_argument("ConvSpec: non-positive kernel size");
      if (stride[a] != 1) throw std::invalid_argument("ConvSpec: only stride 1 is supported");
      if (padding[a] < 0) throw std::invalid_argument("ConvSpec: negative padding");
    }
    if (in_channels <= 0 || out_channels <= 0)
      throw std::invalid_argument("ConvSpec: channel counts must be positive");
  }

  std::int64_t out_dim(std::int64_t in, int axis) const {
    return in + 2 * padding[axis] - kernel_extent(kernel[axis], dilation[axis]) + 1;
  }

  Shape5 out_shape(const Shape5& in) const {
    return {in.n, out_channels, out_dim(in.d, 0), out_dim(in.h, 1), out_dim(in.w, 2)};
  }
};

namespace detail {

template <typename S>
inline void check_conv_shapes(const Tensor5<S>& x, const Tensor5<S>& w, const ConvSpec& spec) {
  spec.validate();
  if (w.shape.n != spec.out_channels || w.shape.c != spec.in_channels ||
      w.shape.d != spec.kernel[0] || w.shape.h != spec.kernel[1] || w.shape.w != spec.kernel[2])
    throw std::invalid_argument("conv3d: weight shape " + w.shape.str() +
                                " does not match spec (out=" + std::to_string(spec.out_channels) +
                                ", in=" + std::to_string(spec.in_channels) + ", k=" +
                                std::to_string(spec.kernel[0]) + ")");
  if (x.shape.c != spec.in_channels)
    throw std::invalid_argument("conv3d: input shape " + x.shape.str() + " has " +
                                std::to_string(x.shape.c) + " channels, weights " + w.shape.str() +
                                " expect " + std::to_string(spec.in_channels));
  for (int a = 0; a < 3; ++a) {
    std::int64_t in = a == 0 ? x.shape.d : (a == 1 ? x.shape.h : x.shape.w);
    if (spec.out_dim(in, a) <= 0)
      throw std::invalid_argument("conv3d: kernel extent exceeds padded input on axis " +
                                  std::to_string(a) + " for input " + x.shape.str());
  }
}

}  // namespace detail

/// Direct dilated 3-D convolution, zero padding, stride 1. Out-of-bounds
/// samples read as zero. Accumulation per output voxel is k-major
/// (ic, kd, kh, kw) regardless of worker count, so results are bit-stable.
template <typename S>
Tensor5<S> conv3d_forward(const Tensor5<S>& x, const Tensor5<S>& w, const ConvSpec& spec,
                          const std::vector<S>* bias = nullptr) {
  detail::check_conv_shapes(x, w, spec);
  if (bias && static_cast<std::int64_t>(bias->size()) != spec.out_channels)
    throw std::invalid_argument("conv3d: bias length " + std::to_string(bias->size()) +
                                " != out_channels " + std::to_string(spec.out_channels));

  const std::int64_t N = x.shape.n, IC = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
  const std::int64_t OC = spec.out_channels;
  const std::int64_t OD = spec.out_dim(D, 0), OH = spec.out_dim(H, 1), OW = spec.out_dim(W, 2);
  const std::int64_t KD = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const std::int64_t rd = spec.dilation[0], rh = spec.dilation[1], rw = spec.dilation[2];
  const std::int64_t pd = spec.padding[0], ph = spec.padding[1], pw = spec.padding[2];

  Tensor5<S> y({N, OC, OD, OH, OW});
  const S* xd = x.data.data();
  const S* wd = w.data.data();
  S* yd = y.data.data();

  // One task owns the (oh, ow) plane of a single (n, oc, od) slab.
  parallel_for(N * OC * OD, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t slab = begin; slab < end; ++slab) {
      const std::int64_t od = slab % OD;
      const std::int64_t oc = (slab / OD) % OC;
      const std::int64_t n = slab / (OD * OC);
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        S* yrow = yd + (((n * OC + oc) * OD + od) * OH + oh) * OW;
        const S init = bias ? (*bias)[static_cast<size_t>(oc)] : S(0);
        for (std::int64_t ow = 0; ow < OW; ++ow) yrow[ow] = init;
        for (std::int64_t ic = 0; ic < IC; ++ic) {
          for (std::int64_t kd = 0; kd < KD; ++kd) {
            const std::int64_t id = od + rd * kd - pd;
            if (id < 0 || id >= D) continue;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
              const std::int64_t ih = oh + rh * kh - ph;
              if (ih < 0 || ih >= H) continue;
              const S* xrow = xd + (((n * IC + ic) * D + id) * H + ih) * W;
              const S* wrow = wd + (((oc * IC + ic) * KD + kd) * KH + kh) * KW;
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                const std::int64_t off = rw * kw - pw;
                const std::int64_t lo = std::max<std::int64_t>(0, -off);
                const std::int64_t hi = std::min(OW, W - off);
                const S wk = wrow[kw];
                const S* xs = xrow + off;
                for (std::int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wk * xs[ow];
              }
            }
          }
        }
      }
    }
  });
  return y;
}

/// Adjoint wrt the input, accumulated into dx (length = numel of xshape).
template <typename S>
void conv3d_backward_input_acc(const Tensor5<S>& gy, const Tensor5<S>& w, const ConvSpec& spec,
                               const Shape5& xshape, S* dx) {
  const std::int64_t N = xshape.n, IC = xshape.c, D = xshape.d, H = xshape.h, W = xshape.w;
  const std::int64_t OC = spec.out_channels;
  const std::int64_t OD = gy.shape.d, OH = gy.shape.h, OW = gy.shape.w;
  const std::int64_t KD = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const std::int64_t rd = spec.dilation[0], rh = spec.dilation[1], rw = spec.dilation[2];
  const std::int64_t pd = spec.padding[0], ph = spec.padding[1], pw = spec.padding[2];

  const S* gyd = gy.data.data();
  const S* wd = w.data.data();

  // One task owns all of dx for a single (n, ic).
  parallel_for(N * IC, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t t = begin; t < end; ++t) {
      const std::int64_t ic = t % IC;
      const std::int64_t n = t / IC;
      for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t od = 0; od < OD; ++od) {
          for (std::int64_t kd = 0; kd < KD; ++kd) {
            const std::int64_t id = od + rd * kd - pd;
            if (id < 0 || id >= D) continue;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              for (std::int64_t kh = 0; kh < KH; ++kh) {
                const std::int64_t ih = oh + rh * kh - ph;
                if (ih < 0 || ih >= H) continue;
                S* xrow = dx + (((n * IC + ic) * D + id) * H + ih) * W;
                const S* gyrow = gyd + (((n * OC + oc) * OD + od) * OH + oh) * OW;
                const S* wrow = wd + (((oc * IC + ic) * KD + kd) * KH + kh) * KW;
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                  const std::int64_t off = rw * kw - pw;
                  const std::int64_t lo = std::max<std::int64_t>(0, -off);
                  const std::int64_t hi = std::min(OW, W - off);
                  const S wk = wrow[kw];
                  S* xs = xrow + off;
                  for (std::int64_t ow = lo; ow < hi; ++ow) xs[ow] += wk * gyrow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

/// Adjoint wrt the weights, accumulated into dw (layout of w).
template <typename S>
void conv3d_backward_weights_acc(const Tensor5<S>& gy, const Tensor5<S>& x, const ConvSpec& spec,
                                 S* dw) {
  const std::int64_t N = x.shape.n, IC = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
  const std::int64_t OC = spec.out_channels;
  const std::int64_t OD = gy.shape.d, OH = gy.shape.h, OW = gy.shape.w;
  const std::int64_t KD = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const std::int64_t rd = spec.dilation[0], rh = spec.dilation[1], rw = spec.dilation[2];
  const std::int64_t pd = spec.padding[0], ph = spec.padding[1], pw = spec.padding[2];

  const S* gyd = gy.data.data();
  const S* xd = x.data.data();

  // One task owns dw for a single oc.
  parallel_for(OC, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t oc = begin; oc < end; ++oc) {
      for (std::int64_t ic = 0; ic < IC; ++ic) {
        for (std::int64_t kd = 0; kd < KD; ++kd) {
          for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const std::int64_t off = rw * kw - pw;
              const std::int64_t lo = std::max<std::int64_t>(0, -off);
              S acc = 0;
              for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t od = 0; od < OD; ++od) {
                  const std::int64_t id = od + rd * kd - pd;
                  if (id < 0 || id >= D) continue;
                  for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh + rh * kh - ph;
                    if (ih < 0 || ih >= H) continue;
                    const S* gyrow = gyd + (((n * OC + oc) * OD + od) * OH + oh) * OW;
                    const S* xs = xd + (((n * IC + ic) * D + id) * H + ih) * W + off;
                    const std::int64_t hi = std::min(OW, W - off);
                    for (std::int64_t ow = lo; ow < hi; ++ow) acc += gyrow[ow] * xs[ow];
                  }
                }
              }
              dw[(((oc * IC + ic) * KD + kd) * KH + kh) * KW + kw] += acc;
            }
          }
        }
      }
    }
  });
}

template <typename S>
void conv3d_backward_bias_acc(const Tensor5<S>& gy, S* db) {
  const std::int64_t N = gy.shape.n, OC = gy.shape.c, sp = gy.shape.spatial();
  const S* gyd = gy.data.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      S acc = 0;
      const S* row = gyd + (n * OC + oc) * sp;
      for (std::int64_t i = 0; i < sp; ++i) acc += row[i];
      db[oc] += acc;
    }
}

/// Saved forward context for the adjoint pass.
template <typename S>
struct Conv3dContext {
  TensorPtr<S> x;
  TensorPtr<S> w;
  ConvSpec spec;
  bool valid() const { return x && w; }
};

template <typename S>
struct Conv3dGrads {
  Tensor5<S> grad_input;
  Tensor5<S> grad_weights;
  std::optional<std::vector<S>> grad_bias;
};

/// Full adjoint of conv3d_forward from the saved context.
template <typename S>
Conv3dGrads<S> conv3d_backward(const Tensor5<S>& grad_out, const Conv3dContext<S>& ctx) {
  if (!ctx.valid())
    throw std::invalid_argument("conv3d_backward: missing saved forward context");
  const ConvSpec& spec = ctx.spec;
  Shape5 want = spec.out_shape(ctx.x->shape);
  if (!(grad_out.shape == want))
    throw std::invalid_argument("conv3d_backward: grad_out shape " + grad_out.shape.str() +
                                " does not match forward output " + want.str());
  Conv3dGrads<S> g{Tensor5<S>(ctx.x->shape), Tensor5<S>(ctx.w->shape), std::nullopt};
  conv3d_backward_input_acc(grad_out, *ctx.w, spec, ctx.x->shape, g.grad_input.data.data());
  conv3d_backward_weights_acc(grad_out, *ctx.x, spec, g.grad_weights.data.data());
  if (spec.has_bias) {
    g.grad_bias.emplace(static_cast<size_t>(spec.out_channels), S(0));
    conv3d_backward_bias_acc(grad_out, g.grad_bias->data());
  }
  return g;
}

}  // namespace spinectx

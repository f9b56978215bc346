#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "spinectx/tensor.hpp"

namespace spinectx {

enum class Mode { Train, Infer };

/// Per-channel affine batch normalization state. gamma/beta are trainable
/// tensors of shape (1,C,1,1,1); running statistics are plain buffers updated
/// by exponential moving average in train mode.
template <typename S>
struct BNState {
  TensorPtr<S> gamma;
  TensorPtr<S> beta;
  std::vector<S> running_mean;
  std::vector<S> running_var;
  S momentum = S(0.1);
  S epsilon = S(1e-5);
  bool stats_initialized = false;

  explicit BNState(std::int64_t channels = 0) {
    if (channels > 0) init(channels);
  }

  void init(std::int64_t channels) {
    gamma = make_tensor<S>({1, channels, 1, 1, 1});
    beta = make_tensor<S>({1, channels, 1, 1, 1});
    gamma->array() = S(1);
    running_mean.assign(static_cast<size_t>(channels), S(0));
    running_var.assign(static_cast<size_t>(channels), S(1));
    stats_initialized = false;
  }

  std::int64_t channels() const { return gamma ? gamma->shape.c : 0; }
};

/// Saved values from a train-mode forward, needed by the adjoint.
template <typename S>
struct BNContext {
  Mode mode = Mode::Train;
  std::vector<S> mean;     // per-channel mean used for normalization
  std::vector<S> inv_std;  // 1/sqrt(var + eps) used for normalization
};

/// Train mode normalizes with per-channel batch statistics over (n,d,h,w) and
/// updates running stats; infer mode uses the running stats only. The affine
/// transform gamma*xhat + beta applies in both modes.
template <typename S>
Tensor5<S> batchnorm(const Tensor5<S>& x, BNState<S>& state, Mode mode,
                     BNContext<S>* ctx = nullptr) {
  const std::int64_t C = x.shape.c;
  if (C != state.channels())
    throw std::invalid_argument("batchnorm: input " + x.shape.str() + " has " +
                                std::to_string(C) + " channels, state has " +
                                std::to_string(state.channels()));
  if (mode == Mode::Infer && !state.stats_initialized)
    throw std::runtime_error("batchnorm: infer mode requested with uninitialized running stats");

  const std::int64_t N = x.shape.n, sp = x.shape.spatial();
  const std::int64_t m = N * sp;  // samples per channel
  Tensor5<S> y(x.shape);

  std::vector<S> mean(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
  if (mode == Mode::Train) {
    for (std::int64_t c = 0; c < C; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* row = x.data.data() + (n * C + c) * sp;
        for (std::int64_t i = 0; i < sp; ++i) {
          const double v = static_cast<double>(row[i]);
          sum += v;
          sq += v * v;
        }
      }
      const double mu = sum / static_cast<double>(m);
      double var = sq / static_cast<double>(m) - mu * mu;  // biased, for normalization
      if (var < 0.0) var = 0.0;
      mean[static_cast<size_t>(c)] = static_cast<S>(mu);
      inv_std[static_cast<size_t>(c)] =
          static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
      // Running variance uses the unbiased estimate, matching common practice.
      const double var_unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
      const double mom = static_cast<double>(state.momentum);
      auto& rm = state.running_mean[static_cast<size_t>(c)];
      auto& rv = state.running_var[static_cast<size_t>(c)];
      rm = static_cast<S>((1.0 - mom) * rm + mom * mu);
      rv = static_cast<S>((1.0 - mom) * rv + mom * var_unbiased);
    }
    state.stats_initialized = true;
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = static_cast<S>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<size_t>(c)]) +
                          static_cast<double>(state.epsilon)));
    }
  }

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const S g = state.gamma->data[static_cast<size_t>(c)];
      const S b = state.beta->data[static_cast<size_t>(c)];
      const S mu = mean[static_cast<size_t>(c)];
      const S is = inv_std[static_cast<size_t>(c)];
      const S* row = x.data.data() + (n * C + c) * sp;
      S* out = y.data.data() + (n * C + c) * sp;
      for (std::int64_t i = 0; i < sp; ++i) out[i] = g * ((row[i] - mu) * is) + b;
    }

  if (ctx) {
    ctx->mode = mode;
    ctx->mean = std::move(mean);
    ctx->inv_std = std::move(inv_std);
  }
  return y;
}

/// Adjoint of batchnorm. Train mode backpropagates through the batch
/// statistics; infer mode treats mean/var as constants.
template <typename S>
void batchnorm_backward_acc(const Tensor5<S>& gy, const Tensor5<S>& x, const BNState<S>& state,
                            const BNContext<S>& ctx, S* dx, S* dgamma, S* dbeta) {
  const std::int64_t N = x.shape.n, C = x.shape.c, sp = x.shape.spatial();
  const std::int64_t m = N * sp;

  for (std::int64_t c = 0; c < C; ++c) {
    const double mu = static_cast<double>(ctx.mean[static_cast<size_t>(c)]);
    const double is = static_cast<double>(ctx.inv_std[static_cast<size_t>(c)]);
    const double g = static_cast<double>(state.gamma->data[static_cast<size_t>(c)]);

    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const S* gr = gy.data.data() + (n * C + c) * sp;
      const S* xr = x.data.data() + (n * C + c) * sp;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double xhat = (static_cast<double>(xr[i]) - mu) * is;
        sum_gy += static_cast<double>(gr[i]);
        sum_gy_xhat += static_cast<double>(gr[i]) * xhat;
      }
    }
    dbeta[c] += static_cast<S>(sum_gy);
    dgamma[c] += static_cast<S>(sum_gy_xhat);

    if (ctx.mode == Mode::Train) {
      // dx = (g*is/m) * (m*gy - sum(gy) - xhat * sum(gy*xhat))
      const double k = g * is / static_cast<double>(m);
      for (std::int64_t n = 0; n < N; ++n) {
        const S* gr = gy.data.data() + (n * C + c) * sp;
        const S* xr = x.data.data() + (n * C + c) * sp;
        S* dr = dx + (n * C + c) * sp;
        for (std::int64_t i = 0; i < sp; ++i) {
          const double xhat = (static_cast<double>(xr[i]) - mu) * is;
          dr[i] += static_cast<S>(k * (static_cast<double>(m) * static_cast<double>(gr[i]) -
                                       sum_gy - xhat * sum_gy_xhat));
        }
      }
    } else {
      const double k = g * is;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* gr = gy.data.data() + (n * C + c) * sp;
        S* dr = dx + (n * C + c) * sp;
        for (std::int64_t i = 0; i < sp; ++i) dr[i] += static_cast<S>(k * static_cast<double>(gr[i]));
      }
    }
  }
}

}  // namespace spinectx

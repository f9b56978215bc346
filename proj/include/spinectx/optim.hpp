#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "spinectx/network.hpp"

namespace spinectx {

/// Bias-corrected Adam state; moment tensors mirror the parameter shapes.
template <typename S>
struct OptimState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
  std::int64_t t = 0;

  explicit OptimState(const ParamStore<S>& store, double lr = 1e-3) : learning_rate(lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("OptimState: learning rate must be positive");
    for (const auto& e : store.params()) {
      m.emplace_back(e.tensor->data.size(), S(0));
      v.emplace_back(e.tensor->data.size(), S(0));
    }
  }
};

/// Standard update m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * mhat / (sqrt(vhat) + eps). Parameters without an
/// allocated gradient are skipped (equivalent to g = 0 on fresh moments).
template <typename S>
void adam_step(ParamStore<S>& store, OptimState<S>& state) {
  if (state.m.size() != store.params().size())
    throw std::invalid_argument("adam_step: moment tensors do not mirror the param store");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < store.params().size(); ++p) {
    auto& tensor = *store.params()[p].tensor;
    if (!tensor.has_grad()) continue;
    if (tensor.grad.size() != state.m[p].size())
      throw std::invalid_argument("adam_step: gradient shape mismatch for \"" +
                                  store.params()[p].name + "\"");
    S* theta = tensor.data.data();
    const S* g = tensor.grad.data();
    S* m = state.m[p].data();
    S* v = state.v[p].data();
    for (size_t i = 0; i < state.m[p].size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      theta[i] = static_cast<S>(static_cast<double>(theta[i]) -
                                state.learning_rate * mhat / (std::sqrt(vhat) + state.eps_adam));
    }
  }
}

/// Reduce-on-plateau: a relative improvement over the best seen loss resets
/// the counter; once the counter exceeds the patience, the learning rate is
/// multiplied by the factor exactly once and the counter resets. The rate
/// never moves any other way.
struct SchedulerState {
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::int64_t epochs_since_improve = 0;
  std::int64_t patience = 5;
  double factor = 0.1;
  double min_improvement = 1e-4;  // relative

  /// Returns true when the learning rate was reduced this step.
  template <typename S>
  bool step(double val_loss, OptimState<S>& optim) {
    if (std::isnan(val_loss) || std::isinf(val_loss))
      throw std::runtime_error("scheduler: non-finite validation loss");
    const bool improved =
        !std::isfinite(best_val_loss) ||
        val_loss < best_val_loss - min_improvement * std::abs(best_val_loss);
    if (improved) {
      best_val_loss = val_loss;
      epochs_since_improve = 0;
      return false;
    }
    epochs_since_improve += 1;
    if (epochs_since_improve > patience) {
      optim.learning_rate *= factor;
      epochs_since_improve = 0;
      return true;
    }
    return false;
  }
};

}  // namespace spinectx

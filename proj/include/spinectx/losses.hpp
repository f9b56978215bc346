#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace spinectx {

/// Flat probability/label pair for the composite loss. Probabilities are
/// post-sigmoid; BCE clamps them to [1e-7, 1-1e-7] internally.
template <typename S>
struct LossInputs {
  std::span<const S> probs;
  std::span<const S> labels;
  S epsilon = S(1e-5);  // Dice smoothing

  void validate() const {
    if (probs.empty()) throw std::invalid_argument("loss: empty input");
    if (probs.size() != labels.size())
      throw std::invalid_argument("loss: probs size " + std::to_string(probs.size()) +
                                  " != labels size " + std::to_string(labels.size()));
  }
};

template <typename S>
struct LossResult {
  S loss = S(0);
  std::vector<S> grad;  // d loss / d p, same length as probs
};

inline constexpr double kBceClampLo = 1e-7;
inline constexpr double kBceClampHi = 1.0 - 1e-7;

/// Mean binary cross entropy with probability clamping; gradient evaluated at
/// the clamped probabilities so both stay finite.
template <typename S>
LossResult<S> bce_loss(const LossInputs<S>& in) {
  in.validate();
  const size_t n = in.probs.size();
  LossResult<S> r;
  r.grad.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(in.probs[i]), kBceClampLo, kBceClampHi);
    const double y = static_cast<double>(in.labels[i]);
    acc -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    r.grad[i] = static_cast<S>(-inv_n * (y / p - (1.0 - y) / (1.0 - p)));
  }
  r.loss = static_cast<S>(acc * inv_n);
  return r;
}

/// Soft Dice loss 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps) with the
/// quotient-rule gradient.
template <typename S>
LossResult<S> dice_loss(const LossInputs<S>& in) {
  in.validate();
  const size_t n = in.probs.size();
  LossResult<S> r;
  r.grad.resize(n);
  const double eps = static_cast<double>(in.epsilon);
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(in.probs[i]);
    const double y = static_cast<double>(in.labels[i]);
    inter += p * y;
    sum_p += p;
    sum_y += y;
  }
  const double num = 2.0 * inter + eps;
  const double den = sum_p + sum_y + eps;
  r.loss = static_cast<S>(1.0 - num / den);
  const double den2 = den * den;
  for (size_t i = 0; i < n; ++i) {
    const double y = static_cast<double>(in.labels[i]);
    r.grad[i] = static_cast<S>(-(2.0 * y * den - num) / den2);
  }
  return r;
}

/// Unweighted BCE + Dice; the gradient is the elementwise sum of the parts.
template <typename S>
LossResult<S> composite_loss(const LossInputs<S>& in) {
  LossResult<S> b = bce_loss(in);
  LossResult<S> d = dice_loss(in);
  LossResult<S> r;
  r.loss = b.loss + d.loss;
  r.grad.resize(b.grad.size());
  for (size_t i = 0; i < r.grad.size(); ++i) r.grad[i] = b.grad[i] + d.grad[i];
  return r;
}

}  // namespace spinectx

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "spinectx/batchnorm.hpp"
#include "spinectx/conv.hpp"
#include "spinectx/ops.hpp"
#include "spinectx/tensor.hpp"

namespace spinectx {

/// Ordered record of executed primitives. Replaying in reverse visits each op
/// exactly once; gradient accumulation is additive, so a tensor consumed by k
/// ops receives the sum of k contributions. Single-writer: one training step
/// (or one Grad-CAM invocation) owns one tape.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  /// Runs every recorded adjoint in reverse order. Seeds must already be in
  /// place (set the .grad of the final output(s) before calling).
  void backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// Taped wrappers: forward through the value primitives, record the adjoint
// when a tape is supplied. tape == nullptr runs forward-only.

template <typename S>
TensorPtr<S> conv3d(Tape<S>* tape, const TensorPtr<S>& x, const TensorPtr<S>& w,
                    const TensorPtr<S>& bias, const ConvSpec& spec) {
  const std::vector<S>* bptr = nullptr;
  std::vector<S> bias_vals;
  if (spec.has_bias) {
    if (!bias) throw std::invalid_argument("conv3d: spec declares bias but none supplied");
    bias_vals.assign(bias->data.begin(), bias->data.end());
    bptr = &bias_vals;
  }
  auto y = std::make_shared<Tensor5<S>>(conv3d_forward(*x, *w, spec, bptr));
  if (tape) {
    tape->record([x, w, bias, y, spec] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      x->ensure_grad();
      w->ensure_grad();
      conv3d_backward_input_acc(gy, *w, spec, x->shape, x->grad.data());
      conv3d_backward_weights_acc(gy, *x, spec, w->grad.data());
      if (spec.has_bias && bias) {
        bias->ensure_grad();
        conv3d_backward_bias_acc(gy, bias->grad.data());
      }
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> relu(Tape<S>* tape, const TensorPtr<S>& x) {
  auto y = std::make_shared<Tensor5<S>>(relu(*x));
  if (tape) {
    tape->record([x, y] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      x->ensure_grad();
      relu_backward_acc(gy, *x, x->grad.data());
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> sigmoid(Tape<S>* tape, const TensorPtr<S>& x) {
  auto y = std::make_shared<Tensor5<S>>(sigmoid(*x));
  if (tape) {
    tape->record([x, y] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      x->ensure_grad();
      sigmoid_backward_acc(gy, *y, x->grad.data());
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> maxpool3d(Tape<S>* tape, const TensorPtr<S>& x) {
  auto r = maxpool3d(*x);
  auto y = std::make_shared<Tensor5<S>>(std::move(r.output));
  if (tape) {
    auto argmax = std::make_shared<std::vector<std::int64_t>>(std::move(r.argmax));
    tape->record([x, y, argmax] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      x->ensure_grad();
      maxpool3d_backward_acc(gy, *argmax, x->grad.data());
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> trilinear_upsample(Tape<S>* tape, const TensorPtr<S>& x) {
  auto y = std::make_shared<Tensor5<S>>(trilinear_upsample(*x));
  if (tape) {
    tape->record([x, y] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      x->ensure_grad();
      trilinear_upsample_backward_acc(gy, x->shape, x->grad.data());
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> concat_channels(Tape<S>* tape, const std::vector<TensorPtr<S>>& parts) {
  std::vector<const Tensor5<S>*> raw;
  raw.reserve(parts.size());
  for (const auto& p : parts) raw.push_back(p.get());
  auto y = std::make_shared<Tensor5<S>>(concat_channels<S>(raw));
  if (tape) {
    tape->record([parts, y] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      std::vector<Shape5> shapes;
      std::vector<S*> dxs;
      for (const auto& p : parts) {
        p->ensure_grad();
        shapes.push_back(p->shape);
        dxs.push_back(p->grad.data());
      }
      concat_channels_backward_acc(gy, shapes, dxs);
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> add(Tape<S>* tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  auto y = std::make_shared<Tensor5<S>>(add(*a, *b));
  if (tape) {
    tape->record([a, b, y] {
      y->ensure_grad();
      Tensor5<S> gy(y->shape);
      gy.data = y->grad;
      a->ensure_grad();
      b->ensure_grad();
      add_backward_acc(gy, a->grad.data(), b->grad.data());
    });
  }
  return y;
}

template <typename S>
TensorPtr<S> batchnorm(Tape<S>* tape, const TensorPtr<S>& x, BNState<S>& state, Mode mode) {
  if (!tape) {
    return std::make_shared<Tensor5<S>>(batchnorm(*x, state, mode));
  }
  auto ctx = std::make_shared<BNContext<S>>();
  auto y = std::make_shared<Tensor5<S>>(batchnorm(*x, state, mode, ctx.get()));
  // The lambda captures gamma/beta pointers, not the state object, so the
  // layer owning the state may move freely.
  auto gamma = state.gamma;
  auto beta = state.beta;
  auto eps = state.epsilon;
  tape->record([x, y, ctx, gamma, beta, eps] {
    y->ensure_grad();
    Tensor5<S> gy(y->shape);
    gy.data = y->grad;
    x->ensure_grad();
    gamma->ensure_grad();
    beta->ensure_grad();
    BNState<S> view;
    view.gamma = gamma;
    view.beta = beta;
    view.epsilon = eps;
    batchnorm_backward_acc(gy, *x, view, *ctx, x->grad.data(), gamma->grad.data(),
                           beta->grad.data());
  });
  return y;
}

}  // namespace spinectx

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spinectx/batchnorm.hpp"
#include "spinectx/conv.hpp"
#include "spinectx/ops.hpp"
#include "spinectx/tape.hpp"
#include "spinectx/tensor.hpp"

namespace spinectx {

/// Channel widths, dilation set, and patch size: fully determines the
/// architecture and its parameter count. patch_shape is (d,h,w) internal
/// order, so the default {64,128,128} is a 128x128x64 patch.
struct ModelConfig {
  std::int64_t in_channels = 1;
  std::array<std::int64_t, 3> encoder_widths{16, 32, 64};
  std::int64_t bottleneck_width = 128;
  std::int64_t context_branch_width = 16;
  std::array<std::int64_t, 4> dilation_rates{1, 2, 4, 8};
  std::array<std::int64_t, 3> patch_shape{64, 128, 128};
  std::int64_t out_channels = 1;

  void validate() const {
    for (auto w : encoder_widths)
      if (w < 1) throw std::invalid_argument("ModelConfig: encoder width < 1");
    if (bottleneck_width < 1 || context_branch_width < 1 || in_channels < 1 ||
        out_channels < 1)
      throw std::invalid_argument("ModelConfig: widths must be >= 1");
    for (auto r : dilation_rates)
      if (r < 1)
        throw std::invalid_argument("ModelConfig: dilation rate " + std::to_string(r) + " < 1");
    for (auto p : patch_shape)
      if (p % 8 != 0 || p <= 0)
        throw std::invalid_argument("ModelConfig: patch dim " + std::to_string(p) +
                                    " not divisible by 8");
  }

  /// Decoder up-convolutions halve the channel count (floor at 1).
  std::int64_t half(std::int64_t c) const { return std::max<std::int64_t>(1, c / 2); }

  std::array<std::int64_t, 3> bottleneck_dims() const {
    return {patch_shape[0] / 8, patch_shape[1] / 8, patch_shape[2] / 8};
  }
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"in_channels", c.in_channels},
                             {"encoder_widths", c.encoder_widths},
                             {"bottleneck_width", c.bottleneck_width},
                             {"context_branch_width", c.context_branch_width},
                             {"dilation_rates", c.dilation_rates},
                             {"patch_shape", c.patch_shape},
                             {"out_channels", c.out_channels}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.value("in_channels", std::int64_t{1});
  if (j.contains("encoder_widths"))
    for (int i = 0; i < 3; ++i) c.encoder_widths[i] = j["encoder_widths"].at(i);
  c.bottleneck_width = j.value("bottleneck_width", std::int64_t{128});
  c.context_branch_width = j.value("context_branch_width", std::int64_t{16});
  if (j.contains("dilation_rates"))
    for (int i = 0; i < 4; ++i) c.dilation_rates[i] = j["dilation_rates"].at(i);
  if (j.contains("patch_shape"))
    for (int i = 0; i < 3; ++i) c.patch_shape[i] = j["patch_shape"].at(i);
  c.out_channels = j.value("out_channels", std::int64_t{1});
  c.validate();
  return c;
}

/// Named parameter and buffer registry with stable, deterministic iteration
/// order (registration order). Buffers hold BN running statistics; they are
/// serialized but excluded from the parameter count.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    TensorPtr<S> tensor;
  };

  TensorPtr<S> add_param(const std::string& name, const Shape5& shape) {
    check_unique(name);
    auto t = make_tensor<S>(shape);
    params_.push_back({name, t});
    return t;
  }
  void add_param(const std::string& name, const TensorPtr<S>& t) {
    check_unique(name);
    params_.push_back({name, t});
  }
  void add_buffer(const std::string& name, const TensorPtr<S>& t) {
    check_unique(name);
    buffers_.push_back({name, t});
  }

  const std::vector<Entry>& params() const { return params_; }
  const std::vector<Entry>& buffers() const { return buffers_; }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& e : params_) n += e.tensor->numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : params_) e.tensor->zero_grad();
  }

  TensorPtr<S> find(const std::string& name) const {
    for (const auto& e : params_)
      if (e.name == name) return e.tensor;
    for (const auto& e : buffers_)
      if (e.name == name) return e.tensor;
    return nullptr;
  }

 private:
  void check_unique(const std::string& name) const {
    if (find(name))
      throw std::invalid_argument("ParamStore: duplicate parameter name \"" + name + "\"");
  }
  std::vector<Entry> params_;
  std::vector<Entry> buffers_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
struct Conv3dLayer {
  TensorPtr<S> weight;
  TensorPtr<S> bias;  // null unless spec.has_bias
  ConvSpec spec;

  void build(ParamStore<S>& store, const std::string& path, const ConvSpec& s) {
    spec = s;
    weight = store.add_param(path + ".weight", {s.out_channels, s.in_channels, s.kernel[0],
                                                s.kernel[1], s.kernel[2]});
    if (s.has_bias) bias = store.add_param(path + ".bias", {1, s.out_channels, 1, 1, 1});
  }

  TensorPtr<S> operator()(Tape<S>* tape, const TensorPtr<S>& x) const {
    return conv3d(tape, x, weight, bias, spec);
  }
};

template <typename S>
struct BatchNorm3dLayer {
  BNState<S> state;

  void build(ParamStore<S>& store, const std::string& path, std::int64_t channels) {
    state.init(channels);
    store.add_param(path + ".gamma", state.gamma);
    store.add_param(path + ".beta", state.beta);
    auto rm = make_tensor<S>({1, channels, 1, 1, 1});
    auto rv = make_tensor<S>({1, channels, 1, 1, 1});
    rv->array() = S(1);
    store.add_buffer(path + ".running_mean", rm);
    store.add_buffer(path + ".running_var", rv);
    running_mean_buf_ = rm;
    running_var_buf_ = rv;
  }

  TensorPtr<S> operator()(Tape<S>* tape, const TensorPtr<S>& x, Mode mode) {
    sync_from_buffers();
    auto y = batchnorm(tape, x, state, mode);
    sync_to_buffers();
    return y;
  }

  /// Buffers are the serialized source of truth; the BNState vectors are the
  /// working copies.
  void sync_from_buffers() {
    std::copy(running_mean_buf_->data.begin(), running_mean_buf_->data.end(),
              state.running_mean.begin());
    std::copy(running_var_buf_->data.begin(), running_var_buf_->data.end(),
              state.running_var.begin());
  }
  void sync_to_buffers() {
    std::copy(state.running_mean.begin(), state.running_mean.end(),
              running_mean_buf_->data.begin());
    std::copy(state.running_var.begin(), state.running_var.end(),
              running_var_buf_->data.begin());
  }

  TensorPtr<S> running_mean_buf_;
  TensorPtr<S> running_var_buf_;
};

/// Two conv-BN-ReLU stages plus an identity (or 1x1x1 projection) shortcut
/// summed into the output.
template <typename S>
struct ResidualBlock {
  Conv3dLayer<S> conv1, conv2;
  BatchNorm3dLayer<S> bn1, bn2;
  std::optional<Conv3dLayer<S>> proj;  // present iff in_c != out_c

  void build(ParamStore<S>& store, const std::string& path, std::int64_t in_c,
             std::int64_t out_c) {
    conv1.build(store, path + ".conv1", ConvSpec::same(in_c, out_c, 3, 1));
    bn1.build(store, path + ".bn1", out_c);
    conv2.build(store, path + ".conv2", ConvSpec::same(out_c, out_c, 3, 1));
    bn2.build(store, path + ".bn2", out_c);
    if (in_c != out_c) {
      proj.emplace();
      proj->build(store, path + ".proj", ConvSpec::same(in_c, out_c, 1, 1));
    }
  }

  TensorPtr<S> operator()(Tape<S>* tape, const TensorPtr<S>& x, Mode mode) {
    auto h = relu(tape, bn1(tape, conv1(tape, x), mode));
    h = bn2(tape, conv2(tape, h), mode);
    auto shortcut = proj ? (*proj)(tape, x) : x;
    return relu(tape, add(tape, h, shortcut));
  }
};

/// Four parallel dilated 3x3x3 branches, channel concat, 1x1x1 fuse, BN, ReLU.
template <typename S>
struct ContextBlock {
  std::array<Conv3dLayer<S>, 4> branches;
  Conv3dLayer<S> fuse;
  BatchNorm3dLayer<S> bn;
  std::array<std::int64_t, 4> rates{};

  void build(ParamStore<S>& store, const std::string& path, std::int64_t width,
             std::int64_t branch_width, const std::array<std::int64_t, 4>& dilation_rates) {
    rates = dilation_rates;
    for (int i = 0; i < 4; ++i) {
      if (rates[i] < 1)
        throw std::invalid_argument("context block: dilation rate " + std::to_string(rates[i]) +
                                    " < 1");
      branches[i].build(store, path + ".branch" + std::to_string(i),
                        ConvSpec::same(width, branch_width, 3, rates[i]));
    }
    fuse.build(store, path + ".fuse", ConvSpec::same(4 * branch_width, width, 1, 1));
    bn.build(store, path + ".bn", width);
  }

  TensorPtr<S> operator()(Tape<S>* tape, const TensorPtr<S>& f_in, Mode mode) {
    std::vector<TensorPtr<S>> outs;
    outs.reserve(4);
    for (int i = 0; i < 4; ++i) outs.push_back(branches[i](tape, f_in));
    auto cat = concat_channels(tape, outs);
    return relu(tape, bn(tape, fuse(tape, cat), mode));
  }
};

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t rb_params(std::int64_t in_c, std::int64_t out_c) {
  std::int64_t n = 27 * in_c * out_c + 27 * out_c * out_c + 4 * out_c;
  if (in_c != out_c) n += in_c * out_c;  // 1x1x1 projection, no bias
  return n;
}

}  // namespace detail

/// Exact scalar parameter total as a pure function of the config: conv
/// weights, the head bias, and BN gamma/beta. Running statistics are excluded
/// (the usual counting convention). Dilation rates never enter the count.
inline std::int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const auto& e = cfg.encoder_widths;
  const std::int64_t B = cfg.bottleneck_width, br = cfg.context_branch_width;
  std::int64_t n = 0;
  n += detail::rb_params(cfg.in_channels, e[0]);
  n += detail::rb_params(e[0], e[1]);
  n += detail::rb_params(e[1], e[2]);
  n += detail::rb_params(e[2], B);
  n += 4 * 27 * B * br + (4 * br) * B + 2 * B;  // context branches + fuse + BN
  std::int64_t up_in = B;
  for (int stage = 2; stage >= 0; --stage) {
    const std::int64_t up_out = std::max<std::int64_t>(1, up_in / 2);
    n += 27 * up_in * up_out + 2 * up_out;  // up conv + BN
    n += detail::rb_params(up_out + e[stage], e[stage]);
    up_in = e[stage];
  }
  n += e[0] * cfg.out_channels + cfg.out_channels;  // 1x1x1 head with bias
  return n;
}

// ---------------------------------------------------------------------------
// The full encoder / context / decoder network
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardResult {
  TensorPtr<S> logits;
  TensorPtr<S> bottleneck;  // null when capture was disabled
};

template <typename S>
struct ForwardOptions {
  Mode mode = Mode::Infer;
  Tape<S>* tape = nullptr;
  bool capture_bottleneck = true;
};

template <typename S>
class SpineContextResUNet {
 public:
  explicit SpineContextResUNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const auto& e = cfg.encoder_widths;
    enc_[0].build(store_, "enc1", cfg.in_channels, e[0]);
    enc_[1].build(store_, "enc2", e[0], e[1]);
    enc_[2].build(store_, "enc3", e[1], e[2]);
    bottleneck_rb_.build(store_, "bottleneck.rb", e[2], cfg.bottleneck_width);
    context_.build(store_, "bottleneck.ctx", cfg.bottleneck_width, cfg.context_branch_width,
                   cfg.dilation_rates);
    std::int64_t up_in = cfg.bottleneck_width;
    for (int stage = 2; stage >= 0; --stage) {
      const std::int64_t up_out = cfg.half(up_in);
      auto& d = dec_[stage];
      const std::string path = "dec" + std::to_string(stage + 1);
      d.up.build(store_, path + ".up", ConvSpec::same(up_in, up_out, 3, 1));
      d.up_bn.build(store_, path + ".up_bn", up_out);
      d.rb.build(store_, path + ".rb", up_out + e[stage], e[stage]);
      up_in = e[stage];
    }
    head_.build(store_, "head", ConvSpec::same(e[0], cfg.out_channels, 1, 1, /*bias=*/true));
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& store() { return store_; }
  const ParamStore<S>& store() const { return store_; }

  /// He fan-in scaled normal init for conv weights; BN gamma=1, beta=0;
  /// deterministic given the seed.
  void init_params(std::uint64_t seed) {
    NormalSampler rng(seed);
    for (const auto& e : store_.params()) {
      auto& t = *e.tensor;
      if (e.name.ends_with(".weight")) {
        const std::int64_t fan_in = t.shape.c * t.shape.d * t.shape.h * t.shape.w;
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<S>(rng.next() * std);
      } else if (e.name.ends_with(".gamma")) {
        t.array() = S(1);
      } else {
        t.array() = S(0);  // beta and biases
      }
    }
    for_each_bn([](BatchNorm3dLayer<S>& bn) {
      bn.state.running_mean.assign(bn.state.running_mean.size(), S(0));
      bn.state.running_var.assign(bn.state.running_var.size(), S(1));
      bn.state.stats_initialized = false;
      bn.sync_to_buffers();
    });
  }

  /// Marks running statistics as valid (after loading a checkpoint).
  void set_bn_stats_initialized(bool v) {
    for_each_bn([v](BatchNorm3dLayer<S>& bn) { bn.state.stats_initialized = v; });
  }
  bool bn_stats_initialized() const {
    bool all = true;
    const_cast<SpineContextResUNet*>(this)->for_each_bn(
        [&all](BatchNorm3dLayer<S>& bn) { all = all && bn.state.stats_initialized; });
    return all;
  }

  ForwardResult<S> forward(const TensorPtr<S>& input, const ForwardOptions<S>& opt) {
    const Shape5& s = input->shape;
    if (s.c != cfg_.in_channels)
      throw std::invalid_argument("forward: input " + s.str() + " has wrong channel count");
    for (auto [dim, name] :
         {std::pair{s.d, 'd'}, std::pair{s.h, 'h'}, std::pair{s.w, 'w'}})
      if (dim % 8 != 0)
        throw std::invalid_argument(std::string("forward: input dim ") + name + "=" +
                                    std::to_string(dim) + " not divisible by 8");

    Tape<S>* t = opt.tape;
    const Mode m = opt.mode;

    auto s1 = enc_[0](t, input, m);        // full res, e0 channels
    auto p1 = maxpool3d(t, s1);
    auto s2 = enc_[1](t, p1, m);           // 1/2
    auto p2 = maxpool3d(t, s2);
    auto s3 = enc_[2](t, p2, m);           // 1/4
    auto p3 = maxpool3d(t, s3);
    auto b = bottleneck_rb_(t, p3, m);     // 1/8
    b = context_(t, b, m);

    ForwardResult<S> out;
    if (opt.capture_bottleneck) out.bottleneck = b;

    std::array<TensorPtr<S>, 3> skips{s1, s2, s3};
    auto x = b;
    for (int stage = 2; stage >= 0; --stage) {
      auto& d = dec_[stage];
      auto up = relu(t, d.up_bn(t, d.up(t, trilinear_upsample(t, x)), m));
      x = d.rb(t, concat_channels(t, {up, skips[static_cast<size_t>(stage)]}), m);
    }
    out.logits = head_(t, x);
    return out;
  }

  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    for (auto& e : enc_) {
      fn(e.bn1);
      fn(e.bn2);
    }
    fn(bottleneck_rb_.bn1);
    fn(bottleneck_rb_.bn2);
    fn(context_.bn);
    for (auto& d : dec_) {
      fn(d.up_bn);
      fn(d.rb.bn1);
      fn(d.rb.bn2);
    }
  }

 private:
  struct DecoderStage {
    Conv3dLayer<S> up;
    BatchNorm3dLayer<S> up_bn;
    ResidualBlock<S> rb;
  };

  ModelConfig cfg_;
  ParamStore<S> store_;
  std::array<ResidualBlock<S>, 3> enc_;
  ResidualBlock<S> bottleneck_rb_;
  ContextBlock<S> context_;
  std::array<DecoderStage, 3> dec_;
  Conv3dLayer<S> head_;
};

}  // namespace spinectx

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spinectx/checkpoint.hpp"
#include "spinectx/infer.hpp"
#include "spinectx/losses.hpp"
#include "spinectx/metrics.hpp"
#include "spinectx/network.hpp"
#include "spinectx/optim.hpp"
#include "spinectx/phantom.hpp"
#include "spinectx/tape.hpp"
#include "spinectx/volume.hpp"

namespace spinectx {

struct TrainConfig {
  ModelConfig model;
  std::vector<PhantomSpec> train_specs;
  std::vector<PhantomSpec> val_specs;
  std::int64_t epochs = 8;
  std::int64_t steps_per_epoch = 25;
  std::int64_t batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 42;
  double fg_bias = 0.5;  // fraction of crops centered on a mask voxel
};

/// The fixed desk-scale recipe: tiny widths, 32x64x64 phantoms with
/// distractors, 16x32x32 patches, seed 42. Runs in minutes on a laptop CPU;
/// the full-size recipe stays available through the config file.
inline TrainConfig desk_recipe(const std::array<std::int64_t, 4>& rates = {1, 2, 4, 8}) {
  TrainConfig cfg;
  cfg.model.encoder_widths = {4, 8, 16};
  cfg.model.bottleneck_width = 32;
  cfg.model.context_branch_width = 8;
  cfg.model.dilation_rates = rates;
  cfg.model.patch_shape = {16, 32, 32};
  for (std::uint64_t s : {101, 102, 103, 104, 105, 106}) {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.seed = s;
    cfg.train_specs.push_back(spec);
  }
  for (std::uint64_t s : {201, 202}) {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.seed = s;
    cfg.val_specs.push_back(spec);
  }
  cfg.epochs = 10;
  cfg.steps_per_epoch = 30;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = 42;
  return cfg;
}

/// Held-out phantoms for the desk benchmark (never seen in training).
inline std::vector<PhantomSpec> desk_heldout_specs() {
  std::vector<PhantomSpec> out;
  for (std::uint64_t s : {301, 302, 303}) {
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.seed = s;
    out.push_back(spec);
  }
  return out;
}

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
  nlohmann::ordered_json model;
  to_json(model, c.model);
  j = nlohmann::ordered_json{{"model", model},
                             {"epochs", c.epochs},
                             {"steps_per_epoch", c.steps_per_epoch},
                             {"batch_size", c.batch_size},
                             {"learning_rate", c.learning_rate},
                             {"seed", c.seed},
                             {"fg_bias", c.fg_bias}};
  j["train_phantoms"] = nlohmann::ordered_json::array();
  for (const auto& s : c.train_specs) {
    nlohmann::ordered_json js;
    to_json(js, s);
    j["train_phantoms"].push_back(js);
  }
  j["val_phantoms"] = nlohmann::ordered_json::array();
  for (const auto& s : c.val_specs) {
    nlohmann::ordered_json js;
    to_json(js, s);
    j["val_phantoms"].push_back(js);
  }
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.fg_bias = j.value("fg_bias", c.fg_bias);
  if (j.contains("train_phantoms"))
    for (const auto& js : j["train_phantoms"]) c.train_specs.push_back(phantom_spec_from_json(js));
  if (j.contains("val_phantoms"))
    for (const auto& js : j["val_phantoms"]) c.val_specs.push_back(phantom_spec_from_json(js));
  return c;
}

struct EpochLog {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline std::string train_log_csv_header() { return "epoch,train_loss,val_loss,lr,seconds"; }

inline std::string train_log_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os.precision(9);
  os << e.epoch << "," << e.train_loss << "," << e.val_loss << "," << e.lr << "," << e.seconds;
  return os.str();
}

template <typename S>
struct TrainResult {
  std::vector<EpochLog> log;
  CheckpointMeta best;
  std::unique_ptr<SpineContextResUNet<S>> net;
};

namespace detail {

/// Preprocessed phantom case held in memory: normalized intensities plus the
/// binary mask and its foreground voxel list for biased cropping.
struct TrainCase {
  Volume image;  // preprocessed, [0,1]
  Volume mask;
  std::vector<std::int64_t> fg;  // flat indices into the mask
};

inline TrainCase make_case(const PhantomSpec& spec) {
  PhantomPair p = generate_phantom(spec);
  TrainCase c;
  c.image = preprocess(p.intensity);
  c.mask = p.mask;
  for (std::int64_t i = 0; i < p.mask.voxels(); ++i)
    if (p.mask.data[static_cast<size_t>(i)] > 0.5f) c.fg.push_back(i);
  return c;
}

/// Random crop start, biased to contain foreground with probability fg_bias.
inline std::array<std::int64_t, 3> sample_crop(const TrainCase& c,
                                               const std::array<std::int64_t, 3>& patch,
                                               NormalSampler& rng, double fg_bias) {
  std::array<std::int64_t, 3> start{};
  const auto& dims = c.mask.dims;
  const bool biased = !c.fg.empty() && rng.uniform01() < fg_bias;
  if (biased) {
    const auto pick = c.fg[static_cast<size_t>(rng.raw() % c.fg.size())];
    const std::int64_t z = pick / (dims[1] * dims[2]);
    const std::int64_t y = (pick / dims[2]) % dims[1];
    const std::int64_t x = pick % dims[2];
    const std::array<std::int64_t, 3> center{z, y, x};
    for (int a = 0; a < 3; ++a)
      start[a] = std::clamp<std::int64_t>(center[a] - patch[a] / 2, 0, dims[a] - patch[a]);
  } else {
    for (int a = 0; a < 3; ++a) {
      const std::int64_t range = dims[a] - patch[a];
      start[a] = range > 0 ? static_cast<std::int64_t>(rng.raw() % (range + 1)) : 0;
    }
  }
  return start;
}

template <typename S>
void copy_crop(const Volume& v, const std::array<std::int64_t, 3>& start,
               const std::array<std::int64_t, 3>& patch, S* dst) {
  for (std::int64_t z = 0; z < patch[0]; ++z)
    for (std::int64_t y = 0; y < patch[1]; ++y) {
      const float* src = v.data.data() + v.index(start[0] + z, start[1] + y, start[2]);
      S* row = dst + (z * patch[1] + y) * patch[2];
      for (std::int64_t x = 0; x < patch[2]; ++x) row[x] = static_cast<S>(src[x]);
    }
}

}  // namespace detail

/// Full-volume composite loss in infer mode, used for validation.
template <typename S>
double validation_loss(SpineContextResUNet<S>& net, const std::vector<detail::TrainCase>& cases) {
  double acc = 0.0;
  for (const auto& c : cases) {
    const auto& dims = c.image.dims;
    auto in = make_tensor<S>({1, 1, dims[0], dims[1], dims[2]});
    for (size_t i = 0; i < c.image.data.size(); ++i) in->data[i] = static_cast<S>(c.image.data[i]);
    ForwardOptions<S> opt;
    opt.mode = Mode::Infer;
    opt.capture_bottleneck = false;
    auto out = net.forward(in, opt);
    Tensor5<S> p = sigmoid(*out.logits);
    std::vector<S> labels(c.mask.data.size());
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<S>(c.mask.data[i]);
    LossInputs<S> li{std::span<const S>(p.data), std::span<const S>(labels)};
    acc += static_cast<double>(composite_loss(li).loss);
  }
  return acc / static_cast<double>(cases.size());
}

/// Per step: sample a batch of biased crops, forward in train mode, composite
/// loss on the sigmoid probabilities, tape backward, Adam. Per epoch:
/// validation loss, plateau scheduler, checkpoint-if-best when out_dir is
/// set. Aborts on a non-finite loss, reporting the step and learning rate.
template <typename S = float>
TrainResult<S> train(const TrainConfig& cfg, const std::optional<std::string>& out_dir = {}) {
  cfg.model.validate();
  if (cfg.train_specs.empty() || cfg.val_specs.empty())
    throw std::invalid_argument("train: need at least one train and one val phantom");
  for (auto p : cfg.model.patch_shape)
    if (p % 8 != 0) throw std::invalid_argument("train: patch dims must be divisible by 8");

  std::vector<detail::TrainCase> train_cases, val_cases;
  for (const auto& s : cfg.train_specs) train_cases.push_back(detail::make_case(s));
  for (const auto& s : cfg.val_specs) val_cases.push_back(detail::make_case(s));
  for (const auto& c : train_cases)
    for (int a = 0; a < 3; ++a)
      if (c.image.dims[a] < cfg.model.patch_shape[a])
        throw std::invalid_argument("train: phantom " + c.image.dims_str() +
                                    " smaller than patch");

  TrainResult<S> r;
  r.net = std::make_unique<SpineContextResUNet<S>>(cfg.model);
  r.net->init_params(cfg.seed);
  OptimState<S> optim(r.net->store(), cfg.learning_rate);
  SchedulerState sched;
  NormalSampler rng(cfg.seed ^ 0xdeadbeefcafef00dULL);

  const auto& patch = cfg.model.patch_shape;
  const std::int64_t patch_vox = patch[0] * patch[1] * patch[2];
  CheckpointMeta best;
  best.best_val_loss = std::numeric_limits<double>::infinity();

  std::int64_t global_step = 0;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double train_loss_acc = 0.0;
    for (std::int64_t step = 0; step < cfg.steps_per_epoch; ++step, ++global_step) {
      auto input = make_tensor<S>({cfg.batch_size, 1, patch[0], patch[1], patch[2]});
      std::vector<S> labels(static_cast<size_t>(cfg.batch_size * patch_vox));
      for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
        const auto& c = train_cases[static_cast<size_t>(rng.raw() % train_cases.size())];
        const auto start = detail::sample_crop(c, patch, rng, cfg.fg_bias);
        detail::copy_crop(c.image, start, patch, input->data.data() + b * patch_vox);
        detail::copy_crop(c.mask, start, patch, labels.data() + b * patch_vox);
      }

      Tape<S> tape;
      ForwardOptions<S> opt;
      opt.mode = Mode::Train;
      opt.tape = &tape;
      opt.capture_bottleneck = false;
      auto out = r.net->forward(input, opt);
      auto prob = sigmoid(&tape, out.logits);
      LossInputs<S> li{std::span<const S>(prob->data), std::span<const S>(labels)};
      LossResult<S> loss = composite_loss(li);
      if (!std::isfinite(static_cast<double>(loss.loss)))
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(global_step) + " (lr=" +
                                 std::to_string(optim.learning_rate) + ")");
      train_loss_acc += static_cast<double>(loss.loss);

      r.net->store().zero_grads();
      prob->ensure_grad();
      std::copy(loss.grad.begin(), loss.grad.end(), prob->grad.begin());
      tape.backward();
      adam_step(r.net->store(), optim);
    }

    const double val_loss = validation_loss(*r.net, val_cases);
    if (!std::isfinite(val_loss))
      throw std::runtime_error("train: non-finite validation loss at epoch " +
                               std::to_string(epoch) + " (lr=" +
                               std::to_string(optim.learning_rate) + ")");
    sched.step(val_loss, optim);

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = train_loss_acc / static_cast<double>(cfg.steps_per_epoch);
    log.val_loss = val_loss;
    log.lr = optim.learning_rate;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.log.push_back(log);

    if (val_loss < best.best_val_loss) {
      best.best_val_loss = val_loss;
      best.epoch = epoch;
      best.bn_stats_initialized = true;
      if (out_dir) save_checkpoint(*out_dir + "/best.ckpt", *r.net, best);
    }
  }
  r.best = best;
  return r;
}

/// One evaluation case: a volume/truth pair on disk or in memory.
struct EvalCase {
  std::string id;
  Volume volume;  // raw intensities (HU)
  Volume truth;   // binary mask on the same grid
};

struct EvalReport {
  std::vector<std::pair<std::string, SegMetrics>> per_case;
  SegMetrics mean;  // metric fields are means; counts are pooled sums
};

/// preprocess -> sliding_infer -> binarize -> confusion per case. With
/// oracle=true the truth itself is used as the probability volume, which must
/// yield all-1.0 metrics (harness self-check).
template <typename S = float>
EvalReport evaluate(SpineContextResUNet<S>* net, const std::vector<EvalCase>& cases,
                    double threshold = 0.5, bool oracle = false) {
  if (!oracle && !net) throw std::invalid_argument("evaluate: no model supplied");
  EvalReport rep;
  double dice = 0, iou = 0, prec = 0, rec = 0, f1 = 0;
  for (const auto& c : cases) {
    Volume pre = preprocess(c.volume);
    Volume truth = c.truth;
    if (truth.dims != pre.dims) {
      truth = resample_isotropic(truth, 1.0);
      truth = binarize(truth, 0.5);
    }
    Volume prob;
    if (oracle) {
      prob = truth;
      prob.kind = VolumeKind::Probability;
    } else {
      WindowPlan plan = plan_windows(pre.dims, net->config().patch_shape);
      prob = sliding_infer(pre, plan, network_predictor(*net));
    }
    SegMetrics m = confusion(binarize(prob, threshold), truth);
    rep.per_case.emplace_back(c.id, m);
    dice += m.dice;
    iou += m.iou;
    prec += m.precision;
    rec += m.recall;
    f1 += m.f1;
    rep.mean.tp += m.tp;
    rep.mean.fp += m.fp;
    rep.mean.fn += m.fn;
    rep.mean.tn += m.tn;
  }
  const double n = rep.per_case.empty() ? 1.0 : static_cast<double>(rep.per_case.size());
  rep.mean.dice = dice / n;
  rep.mean.iou = iou / n;
  rep.mean.precision = prec / n;
  rep.mean.recall = rec / n;
  rep.mean.f1 = f1 / n;
  return rep;
}

}  // namespace spinectx

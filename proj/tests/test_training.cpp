#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "spinectx/optim.hpp"
#include "spinectx/phantom.hpp"
#include "spinectx/train.hpp"

using namespace spinectx;

namespace {

/// Tiny one-parameter store for optimizer math.
ParamStore<double> scalar_store(double init) {
  ParamStore<double> s;
  auto t = s.add_param("theta", {1, 1, 1, 1, 1});
  t->data[0] = init;
  return s;
}

}  // namespace

TEST_CASE("adam: first-step magnitude, zero-grad no-op, hand unroll") {
  // t=1, g=1, lr=1e-3: delta = -lr / (1 + eps)
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  s.params()[0].tensor->ensure_grad();
  s.params()[0].tensor->grad[0] = 1.0;
  adam_step(s, opt);
  CHECK(s.params()[0].tensor->data[0] ==
        doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));

  // zero grads with zero moments: parameters unchanged
  auto s2 = scalar_store(0.75);
  OptimState<double> opt2(s2, 1e-3);
  s2.params()[0].tensor->ensure_grad();
  adam_step(s2, opt2);
  CHECK(s2.params()[0].tensor->data[0] == 0.75);

  // two steps with constant g match a hand unroll within 1e-10
  auto s3 = scalar_store(0.0);
  OptimState<double> opt3(s3, 1e-3);
  const double g = 0.3;
  double m = 0, v = 0, theta = 0;
  for (int t = 1; t <= 2; ++t) {
    s3.params()[0].tensor->ensure_grad();
    s3.params()[0].tensor->grad[0] = g;
    adam_step(s3, opt3);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    theta -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
  }
  CHECK(std::abs(s3.params()[0].tensor->data[0] - theta) < 1e-10);
}

TEST_CASE("adam rejects mismatched moment shapes") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  opt.m.clear();
  CHECK_THROWS_AS(adam_step(s, opt), std::invalid_argument);
}

TEST_CASE("scheduler: flat losses drop lr exactly x0.1 at the 7th report") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  SchedulerState sched;
  for (int i = 1; i <= 6; ++i) {
    CHECK_FALSE(sched.step(1.0, opt));
    CHECK(opt.learning_rate == 1e-3);
  }
  CHECK(sched.step(1.0, opt));  // 7th report: counter exceeds patience 5
  CHECK(opt.learning_rate == doctest::Approx(1e-4).epsilon(1e-15));

  // exact multiplication by the factor only
  CHECK(opt.learning_rate == 1e-3 * 0.1);
}

TEST_CASE("scheduler: strictly decreasing losses never drop lr") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  SchedulerState sched;
  double loss = 2.0;
  for (int i = 0; i < 40; ++i) {
    sched.step(loss, opt);
    loss *= 0.9;
  }
  CHECK(opt.learning_rate == 1e-3);
}

TEST_CASE("scheduler: improvement at epoch 5 resets the counter; no drop through 9") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  SchedulerState sched;
  sched.step(1.0, opt);  // epoch 1: becomes best
  for (int e = 2; e <= 4; ++e) sched.step(1.0, opt);  // 3 flat epochs
  sched.step(0.5, opt);                               // epoch 5: improvement, reset
  for (int e = 6; e <= 9; ++e) {
    sched.step(0.5, opt);  // flat again, counter 1..4
    REQUIRE(opt.learning_rate == 1e-3);
  }
}

TEST_CASE("scheduler rejects NaN loss") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  SchedulerState sched;
  CHECK_THROWS_AS(sched.step(std::nan(""), opt), std::runtime_error);
}

TEST_CASE("lr trajectory is non-increasing and every change is exactly x0.1") {
  auto s = scalar_store(0.0);
  OptimState<double> opt(s, 1e-3);
  SchedulerState sched;
  std::mt19937_64 rng(9);
  double prev = opt.learning_rate;
  for (int i = 0; i < 100; ++i) {
    const double loss = 0.5 + 0.5 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
    sched.step(loss, opt);
    REQUIRE(opt.learning_rate <= prev);
    if (opt.learning_rate != prev)
      REQUIRE(opt.learning_rate == doctest::Approx(prev * 0.1).epsilon(1e-12));
    prev = opt.learning_rate;
  }
}

TEST_CASE("phantom: determinism, geometry rejection, intensity properties") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 7;
  auto a = generate_phantom(spec);
  auto b = generate_phantom(spec);
  CHECK(a.intensity.data == b.intensity.data);  // same seed, same bytes
  CHECK(a.mask.data == b.mask.data);

  PhantomSpec other = spec;
  other.seed = 8;
  auto c = generate_phantom(other);
  CHECK(a.intensity.data != c.intensity.data);

  // degenerate geometry rejected
  PhantomSpec bad = spec;
  bad.body_radius_max_mm = 100.0;
  CHECK_THROWS_AS(generate_phantom(bad), std::invalid_argument);

  // mask is binary and within the volume
  for (float m : a.mask.data) REQUIRE((m == 0.0f || m == 1.0f));
}

TEST_CASE("phantom: distractors off, every voxel above 300 HU is in the dilated mask") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 11;
  spec.rib_arcs = false;
  spec.pelvic_blobs = false;
  auto p = generate_phantom(spec);
  const auto& dims = p.mask.dims;
  auto in_dilated = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    for (std::int64_t dz = -1; dz <= 1; ++dz)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t zz = z + dz, yy = y + dy, xx = x + dx;
          if (zz < 0 || zz >= dims[0] || yy < 0 || yy >= dims[1] || xx < 0 || xx >= dims[2])
            continue;
          if (p.mask.at(zz, yy, xx) > 0.5f) return true;
        }
    return false;
  };
  for (std::int64_t z = 0; z < dims[0]; ++z)
    for (std::int64_t y = 0; y < dims[1]; ++y)
      for (std::int64_t x = 0; x < dims[2]; ++x)
        if (p.intensity.at(z, y, x) > 300.0f) REQUIRE(in_dilated(z, y, x));
}

TEST_CASE("phantom: mask fraction in the class-imbalance regime [0.5%, 10%]") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 13;
  auto p = generate_phantom(spec);
  std::int64_t fg = 0;
  for (float m : p.mask.data) fg += m > 0.5f ? 1 : 0;
  const double frac = static_cast<double>(fg) / static_cast<double>(p.mask.voxels());
  CHECK(frac >= 0.005);
  CHECK(frac <= 0.10);
}

TEST_CASE("phantom spec invariants hold across 100 random specs") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    PhantomSpec spec;
    spec.dims = {32 + static_cast<std::int64_t>(rng() % 2) * 8, 32, 32};
    spec.seed = rng();
    spec.vertebra_count = 3 + static_cast<std::int64_t>(rng() % 4);
    spec.body_radius_min_mm = 3.0 + static_cast<double>(rng() % 3);
    spec.body_radius_max_mm = spec.body_radius_min_mm + 1.0 + static_cast<double>(rng() % 2);
    spec.curve_amplitude_mm = static_cast<double>(rng() % 4);
    spec.rib_arcs = rng() & 1;
    spec.pelvic_blobs = rng() & 1;
    auto p = generate_phantom(spec);
    REQUIRE(p.mask.dims == spec.dims);
    std::int64_t fg = 0;
    for (float m : p.mask.data) {
      REQUIRE((m == 0.0f || m == 1.0f));
      fg += m > 0.5f ? 1 : 0;
    }
    REQUIRE(fg > 0);  // bodies always present
    for (float f : p.intensity.data) REQUIRE(std::isfinite(f));
  }
}

TEST_CASE("distractor toggles never change the mask") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 77;
  spec.rib_arcs = true;
  spec.pelvic_blobs = true;
  auto with = generate_phantom(spec);
  spec.rib_arcs = false;
  spec.pelvic_blobs = false;
  auto without = generate_phantom(spec);
  CHECK(with.mask.data == without.mask.data);  // mask is the body union only
  CHECK(with.intensity.data != without.intensity.data);
}

TEST_CASE("biased patch sampler: >= 40% of draws contain foreground") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 19;
  auto c = detail::make_case(spec);
  NormalSampler rng(20);
  const std::array<std::int64_t, 3> patch{16, 32, 32};
  int with_fg = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto start = detail::sample_crop(c, patch, rng, 0.5);
    bool any = false;
    for (std::int64_t z = start[0]; z < start[0] + patch[0] && !any; ++z)
      for (std::int64_t y = start[1]; y < start[1] + patch[1] && !any; ++y)
        for (std::int64_t x = start[2]; x < start[2] + patch[2] && !any; ++x)
          any = c.mask.at(z, y, x) > 0.5f;
    with_fg += any ? 1 : 0;
  }
  CHECK(with_fg >= 400);
}

TEST_CASE("smoke training: loss halves within 200 steps and logs are deterministic") {
  TrainConfig cfg = desk_recipe();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 8;
  cfg.train_specs.resize(2);
  cfg.val_specs.resize(1);

  const auto t0 = std::chrono::steady_clock::now();
  auto r1 = train<float>(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("smoke train: ", secs, " s for ", cfg.epochs * cfg.steps_per_epoch, " steps");
  REQUIRE(r1.log.size() == 2);

  auto r2 = train<float>(cfg);
  for (size_t i = 0; i < r1.log.size(); ++i) {
    REQUIRE(r1.log[i].train_loss == r2.log[i].train_loss);  // bit-identical
    REQUIRE(r1.log[i].val_loss == r2.log[i].val_loss);
  }
}

TEST_CASE("evaluate: oracle short-circuit yields all-1.0 metrics; hand tallies check out") {
  PhantomSpec spec;
  spec.dims = {32, 64, 64};
  spec.seed = 23;
  auto p = generate_phantom(spec);
  std::vector<EvalCase> cases;
  cases.push_back({"c1", p.intensity, p.mask});
  auto rep = evaluate<float>(nullptr, cases, 0.5, /*oracle=*/true);
  REQUIRE(rep.per_case.size() == 1);
  CHECK(rep.per_case[0].second.dice == 1.0);
  CHECK(rep.per_case[0].second.iou == 1.0);
  CHECK(rep.mean.dice == 1.0);

  // empty truth, empty prediction -> dice 1.0 by the degenerate convention
  Volume z({8, 8, 8}, {1, 1, 1}, VolumeKind::Mask);
  Volume hu({8, 8, 8}, {1, 1, 1});
  for (auto& f : hu.data) f = -1000.0f;  // air: preprocesses to 0 probability
  std::vector<EvalCase> empty_case;
  empty_case.push_back({"empty", hu, z});
  auto rep2 = evaluate<float>(nullptr, empty_case, 0.5, /*oracle=*/true);
  CHECK(rep2.per_case[0].second.dice == 1.0);

  // 8x8x8 toy masks with hand-counted confusion
  Volume pred({2, 2, 2}, {1, 1, 1}, VolumeKind::Mask);
  Volume truth({2, 2, 2}, {1, 1, 1}, VolumeKind::Mask);
  pred.data = {1, 1, 1, 0, 0, 0, 0, 1};
  truth.data = {1, 0, 1, 1, 0, 0, 1, 1};
  auto m = confusion(pred, truth);
  CHECK(m.tp == 3);
  CHECK(m.fp == 1);
  CHECK(m.fn == 2);
  CHECK(m.tn == 2);
  CHECK(m.dice == doctest::Approx(6.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("train rejects impossible setups") {
  TrainConfig cfg = desk_recipe();
  cfg.train_specs.clear();
  CHECK_THROWS_AS(train<float>(cfg), std::invalid_argument);

  TrainConfig cfg2 = desk_recipe();
  cfg2.model.patch_shape = {64, 128, 128};  // larger than the phantoms
  CHECK_THROWS_AS(train<float>(cfg2), std::invalid_argument);
}

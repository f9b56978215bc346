// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Self-contained oracles (naive convolution, finite
// differences, per-voxel reconstruction) live in oracles.hpp and in local
// helpers; none of them share code with the library paths they check.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "spinectx/checkpoint.hpp"
#include "spinectx/gradcam.hpp"
#include "spinectx/infer.hpp"
#include "spinectx/losses.hpp"
#include "spinectx/metrics.hpp"
#include "spinectx/nifti.hpp"
#include "spinectx/parallel.hpp"
#include "spinectx/phantom.hpp"
#include "spinectx/train.hpp"

using namespace spinectx;
namespace fs = std::filesystem;

namespace {

struct Harness {
  int failures = 0;

  void run(int id, const std::string& name, const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = true;
    try {
      fn();
    } catch (const std::exception& e) {
      pass = false;
      detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %2d: %-38s (%.1fs)%s%s\n", pass ? "PASS" : "FAIL", id,
                name.c_str(), secs, detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
};

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

template <typename T>
std::string str(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder_widths = {2, 4, 8};
  c.bottleneck_width = 8;
  c.context_branch_width = 2;
  c.patch_shape = {8, 16, 16};
  return c;
}

template <typename S>
void fill_rand(Tensor5<S>& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  oracle::fill_uniform(t, rng, lo, hi);
}

// --------------------------------------------------------------------------
// Criterion 1: gradient suite
// --------------------------------------------------------------------------

template <typename S>
void gradient_suite_primitives(double tol, double h) {
  std::mt19937_64 rng(2024);
  int instances = 0;
  for (int inst = 0; inst < 20; ++inst) {
    // conv
    {
      const std::int64_t ic = 1 + static_cast<std::int64_t>(rng() % 2);
      const std::int64_t oc = 1 + static_cast<std::int64_t>(rng() % 2);
      Tensor5<S> x({1, ic, 4, 4, 4});
      fill_rand(x, rng);
      Tensor5<S> w({oc, ic, 3, 3, 3});
      fill_rand(w, rng);
      ConvSpec spec = ConvSpec::same(ic, oc, 3, 1 + static_cast<std::int64_t>(rng() % 2));
      auto xs = std::make_shared<Tensor5<S>>(x);
      auto ws = std::make_shared<Tensor5<S>>(w);
      auto y = conv3d_forward(*xs, *ws, spec);
      auto grads = conv3d_backward(oracle::probe_seed(y), Conv3dContext<S>{xs, ws, spec});
      auto loss = [&] { return oracle::probe_loss(conv3d_forward(*xs, *ws, spec)); };
      for (int k = 0; k < 3; ++k) {
        const size_t i = rng() % xs->data.size();
        const double fd = oracle::fd_grad(xs->data, i, h, loss);
        require(oracle::grad_rel_err(static_cast<double>(grads.grad_input.data[i]), fd) < tol,
                "conv grad_input FD mismatch");
        const size_t j = rng() % ws->data.size();
        const double fdw = oracle::fd_grad(ws->data, j, h, loss);
        require(oracle::grad_rel_err(static_cast<double>(grads.grad_weights.data[j]), fdw) < tol,
                "conv grad_weights FD mismatch");
      }
    }
    // batchnorm (train mode)
    {
      const std::int64_t C = 1 + static_cast<std::int64_t>(rng() % 3);
      Tensor5<S> x({2, C, 2, 3, 3});
      fill_rand(x, rng);
      BNState<S> st(C);
      BNContext<S> ctx;
      auto y = batchnorm(x, st, Mode::Train, &ctx);
      auto gy = oracle::probe_seed(y);
      Tensor5<S> dx(x.shape);
      std::vector<S> dg(static_cast<size_t>(C), S(0)), db(static_cast<size_t>(C), S(0));
      batchnorm_backward_acc(gy, x, st, ctx, dx.data.data(), dg.data(), db.data());
      auto loss = [&] {
        BNState<S> fresh(C);
        fresh.gamma->data = st.gamma->data;
        fresh.beta->data = st.beta->data;
        return oracle::probe_loss(batchnorm(x, fresh, Mode::Train));
      };
      for (int k = 0; k < 2; ++k) {
        const size_t i = rng() % x.data.size();
        const double fd = oracle::fd_grad(x.data, i, h, loss);
        require(oracle::grad_rel_err(static_cast<double>(dx.data[i]), fd) < tol,
                "batchnorm grad FD mismatch");
      }
    }
    // relu (away from the kink), maxpool, upsample, add
    {
      Tensor5<S> x({1, 2, 4, 4, 4});
      fill_rand(x, rng);
      for (auto& v : x.data)
        if (std::abs(static_cast<double>(v)) < 0.05) v = S(0.1);
      {
        auto y = relu(x);
        Tensor5<S> dx(x.shape);
        relu_backward_acc(oracle::probe_seed(y), x, dx.data.data());
        auto loss = [&] { return oracle::probe_loss(relu(x)); };
        const size_t i = rng() % x.data.size();
        const double fd = oracle::fd_grad(x.data, i, 1e-4, loss);
        require(oracle::grad_rel_err(static_cast<double>(dx.data[i]), fd) < tol,
                "relu grad FD mismatch");
      }
      {
        auto r = maxpool3d(x);
        Tensor5<S> dx(x.shape);
        maxpool3d_backward_acc(oracle::probe_seed(r.output), r.argmax, dx.data.data());
        auto loss = [&] { return oracle::probe_loss(maxpool3d(x).output); };
        const size_t i = rng() % x.data.size();
        const double fd = oracle::fd_grad(x.data, i, 1e-4, loss);
        require(oracle::grad_rel_err(static_cast<double>(dx.data[i]), fd) < tol,
                "maxpool grad FD mismatch");
      }
      {
        auto up = trilinear_upsample(x);
        Tensor5<S> dx(x.shape);
        trilinear_upsample_backward_acc(oracle::probe_seed(up), x.shape, dx.data.data());
        auto loss = [&] { return oracle::probe_loss(trilinear_upsample(x)); };
        const size_t i = rng() % x.data.size();
        const double fd = oracle::fd_grad(x.data, i, 1e-4, loss);
        require(oracle::grad_rel_err(static_cast<double>(dx.data[i]), fd) < tol,
                "upsample grad FD mismatch");
      }
      {
        Tensor5<S> b(x.shape);
        fill_rand(b, rng);
        auto y = add(x, b);
        Tensor5<S> da(x.shape), db2(x.shape);
        add_backward_acc(oracle::probe_seed(y), da.data.data(), db2.data.data());
        auto loss = [&] { return oracle::probe_loss(add(x, b)); };
        const size_t i = rng() % x.data.size();
        const double fd = oracle::fd_grad(x.data, i, 1e-4, loss);
        require(oracle::grad_rel_err(static_cast<double>(da.data[i]), fd) < tol,
                "add grad FD mismatch");
      }
    }
    ++instances;
  }
  require(instances == 20, "expected 20 instances");
}

template <typename S>
void gradient_suite_network(double tol, double h) {
  SpineContextResUNet<S> net(tiny_config());
  net.init_params(31);
  std::mt19937_64 rng(32);
  auto x = make_tensor<S>({1, 1, 8, 16, 16});
  fill_rand(*x, rng, 0.0, 1.0);
  std::vector<S> labels(x->data.size());
  for (auto& v : labels) v = (rng() & 1) ? S(1) : S(0);

  auto loss_value = [&]() -> double {
    ForwardOptions<S> opt;
    opt.mode = Mode::Train;
    auto out = net.forward(x, opt);
    Tensor5<S> p = sigmoid(*out.logits);
    LossInputs<S> li{std::span<const S>(p.data), std::span<const S>(labels)};
    return static_cast<double>(composite_loss(li).loss);
  };

  Tape<S> tape;
  ForwardOptions<S> opt;
  opt.mode = Mode::Train;
  opt.tape = &tape;
  auto out = net.forward(x, opt);
  auto prob = sigmoid(&tape, out.logits);
  LossInputs<S> li{std::span<const S>(prob->data), std::span<const S>(labels)};
  auto lr = composite_loss(li);
  net.store().zero_grads();
  prob->ensure_grad();
  std::copy(lr.grad.begin(), lr.grad.end(), prob->grad.begin());
  tape.backward();

  const auto& params = net.store().params();
  std::mt19937_64 pick(33);
  int checked = 0, attempts = 0;
  while (checked < 30 && attempts < 400) {
    ++attempts;
    const auto& e = params[pick() % params.size()];
    if (!e.tensor->has_grad()) continue;
    const size_t i = pick() % e.tensor->data.size();
    const double analytic = static_cast<double>(e.tensor->grad[i]);
    const auto fd = oracle::fd_grad_stable(e.tensor->data, i, h, loss_value);
    if (!fd) continue;  // perturbation straddles a kink
    if (std::abs(analytic) < 1e-7 && std::abs(*fd) < 1e-5) {
      ++checked;
      continue;
    }
    require(oracle::grad_rel_err(analytic, *fd) < tol,
            "network parameter gradient FD mismatch (" + e.name + ")");
    ++checked;
  }
  require(checked == 30, "could not stabilize 30 FD probes");
}

// --------------------------------------------------------------------------
// Criterion 8 fixture: trained nets, shared with criteria 12 and 13
// --------------------------------------------------------------------------

struct TrainedFixture {
  std::unique_ptr<SpineContextResUNet<float>> ctx_net;   // {1,2,4,8}
  std::unique_ptr<SpineContextResUNet<float>> abl_net;   // {1,1,1,1}
  double ctx_dice = 0.0;
  double abl_dice = 0.0;
  double train_seconds = 0.0;
  std::vector<EpochLog> ctx_log;
};

TrainedFixture g_fixture;

}  // namespace

int main() {
  set_worker_threads(std::min(4u, std::max(1u, std::thread::hardware_concurrency())));
  Harness h;
  std::printf("spinectx acceptance suite\n");

  // 1 ------------------------------------------------------------------
  h.run(1, "gradient suite (primitives + network)", [] {
    const auto t0 = std::chrono::steady_clock::now();
    gradient_suite_primitives<float>(1e-3, 1e-2);
    gradient_suite_primitives<double>(1e-6, 1e-5);
    gradient_suite_network<float>(1e-2, 1e-2);
    gradient_suite_network<double>(1e-4, 1e-4);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs < 120.0, "gradient suite took " + str(secs) + "s (limit 120s)");
  });

  // 2 ------------------------------------------------------------------
  h.run(2, "convolution oracle, all (K,r) pairs", [] {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(77);
    for (std::int64_t r : {1, 2, 3, 4, 8, 16}) {
      Tensor5<float> x({1, 2, 4, 6, 9});
      fill_rand(x, rng);
      Tensor5<float> w({2, 2, 3, 3, 3});
      fill_rand(w, rng);
      ConvSpec spec = ConvSpec::same(2, 2, 3, r);
      require(oracle::max_rel_err(conv3d_forward(x, w, spec),
                                  oracle::conv3d_naive(x, w, spec)) < 1e-5,
              "K=3 r=" + str(r) + " oracle mismatch");
    }
    Tensor5<float> x({2, 3, 3, 4, 5});
    fill_rand(x, rng);
    Tensor5<float> w({2, 3, 1, 1, 1});
    fill_rand(w, rng);
    ConvSpec spec = ConvSpec::same(3, 2, 1, 1);
    require(oracle::max_rel_err(conv3d_forward(x, w, spec),
                                oracle::conv3d_naive(x, w, spec)) < 1e-5,
            "K=1 oracle mismatch");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs < 60.0, "conv oracle took " + str(secs) + "s (limit 60s)");
  });

  // 3 ------------------------------------------------------------------
  h.run(3, "architecture shapes at full patch size", [] {
    require(kernel_extent(3, 8) == 17, "kernel_extent(3,8) != 17");
    require(kernel_extent(3, 16) == 33, "kernel_extent(3,16) != 33");
    ModelConfig def;  // default widths, patch 64x128x128
    SpineContextResUNet<float> net(def);
    net.init_params(5);
    auto x = make_tensor<float>({1, 1, 64, 128, 128});
    x->array() = 0.3f;
    ForwardOptions<float> opt;
    opt.mode = Mode::Train;
    auto out = net.forward(x, opt);
    require(out.logits->shape == Shape5{1, 1, 64, 128, 128},
            "logits shape " + out.logits->shape.str());
    require(out.bottleneck->shape == Shape5{1, 128, 8, 16, 16},
            "bottleneck shape " + out.bottleneck->shape.str());
    require(all_finite(*out.logits), "non-finite logits");
  });

  // 4 ------------------------------------------------------------------
  h.run(4, "parameter accounting", [] {
    ModelConfig def;
    const std::int64_t n = param_count(def);
    require(n >= 1'500'000 && n <= 1'900'000, "default count " + str(n) + " out of band");
    SpineContextResUNet<float> net(def);
    require(net.store().total_params() == n, "store count disagrees with param_count");
    for (auto rates : std::vector<std::array<std::int64_t, 4>>{
             {1, 1, 1, 1}, {1, 2, 3, 4}, {1, 4, 8, 16}, {1, 2, 4, 8}}) {
      ModelConfig c = def;
      c.dilation_rates = rates;
      require(param_count(c) == n, "count changed under dilation preset");
    }
    ModelConfig minimal;
    minimal.encoder_widths = {1, 1, 1};
    minimal.bottleneck_width = 1;
    minimal.context_branch_width = 1;
    minimal.patch_shape = {8, 8, 8};
    require(param_count(minimal) == 696, "minimal config count " +
                                             str(param_count(minimal)) + " != hand tally 696");
  });

  // 5 ------------------------------------------------------------------
  h.run(5, "loss identities", [] {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 50; ++trial) {
      const size_t n = 1 + rng() % 32;
      std::vector<double> y(n);
      for (auto& v : y) v = (rng() & 1) ? 1.0 : 0.0;
      LossInputs<double> li{std::span<const double>(y), std::span<const double>(y)};
      require(dice_loss(li).loss == 0.0, "dice(p=y) != 0");
    }
    std::vector<double> zeros(8, 0.0);
    LossInputs<double> lz{std::span<const double>(zeros), std::span<const double>(zeros)};
    require(dice_loss(lz).loss == 0.0, "dice all-empty != 0");

    std::vector<double> half(16, 0.5), yy(16);
    for (size_t i = 0; i < 16; ++i) yy[i] = i % 2 ? 1.0 : 0.0;
    LossInputs<double> lh{std::span<const double>(half), std::span<const double>(yy)};
    require(std::abs(bce_loss(lh).loss - std::log(2.0)) < 1e-9, "BCE(0.5) != ln2");

    auto c = composite_loss(lh);
    auto b = bce_loss(lh);
    auto d = dice_loss(lh);
    require(c.loss == b.loss + d.loss, "composite loss not the exact sum");
    for (size_t i = 0; i < c.grad.size(); ++i)
      require(c.grad[i] == b.grad[i] + d.grad[i], "composite grad not the exact sum");

    for (int trial = 0; trial < 1000; ++trial) {
      const size_t n = 8;
      std::vector<double> p(n), y(n);
      for (size_t i = 0; i < n; ++i) {
        p[i] = 0.02 + 0.96 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
        y[i] = (rng() & 1) ? 1.0 : 0.0;
      }
      LossInputs<double> li{std::span<const double>(p), std::span<const double>(y)};
      const double before = composite_loss(li).loss;
      const size_t i = rng() % n;
      const double step = 0.4 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
      p[i] = y[i] > 0.5 ? std::min(p[i] + step, 1.0) : std::max(p[i] - step, 0.0);
      const double after = composite_loss(li).loss;  // li views p
      require(after <= before + 1e-12, "monotonicity violated");
    }
  });

  // 6 ------------------------------------------------------------------
  h.run(6, "Gaussian-weighted reconstruction", [] {
    std::mt19937_64 rng(23);
    const std::array<std::int64_t, 3> patch{8, 16, 16};
    // constant-model identity for >= 10 random volume sizes
    for (int trial = 0; trial < 10; ++trial) {
      std::array<std::int64_t, 3> dims{};
      for (int a = 0; a < 3; ++a)
        dims[a] = 1 + static_cast<std::int64_t>(rng() % (3 * patch[a]));
      Volume v(dims, {1, 1, 1});
      auto plan = plan_windows(dims, patch);
      const float c = 0.1f + 0.8f * static_cast<float>(trial) / 10.0f;
      Volume out = sliding_infer(v, plan, [c](const Tensor5<float>& p,
                                              const std::array<std::int64_t, 3>&) {
        return Tensor5<float>::full(p.shape, c);
      });
      for (float f : out.data)
        require(std::abs(f - c) < 1e-6f, "constant identity violated (c=" + str(c) + ")");
      // coverage: weight_sum positive everywhere == every voxel covered
      std::vector<int> covered(static_cast<size_t>(plan.padded_dims[0] * plan.padded_dims[1] *
                                                   plan.padded_dims[2]),
                               0);
      for (const auto& s : plan.starts)
        for (std::int64_t z = 0; z < patch[0]; ++z)
          for (std::int64_t y = 0; y < patch[1]; ++y)
            for (std::int64_t x = 0; x < patch[2]; ++x)
              covered[static_cast<size_t>(((s[0] + z) * plan.padded_dims[1] + s[1] + y) *
                                              plan.padded_dims[2] +
                                          s[2] + x)]++;
      for (int cvd : covered) require(cvd >= 1, "uncovered voxel");
    }

    // overlap voxels against the brute-force per-voxel oracle
    Volume v({12, 20, 24}, {1, 1, 1});
    auto plan = plan_windows(v.dims, patch);
    auto value = [](const std::array<std::int64_t, 3>& s, std::int64_t z, std::int64_t y,
                    std::int64_t x) {
      return 0.05f + 0.001f * static_cast<float>(s[0] * 3 + s[1] * 2 + s[2]) +
             0.002f * static_cast<float>(z + y + x);
    };
    Volume out = sliding_infer(v, plan, [&](const Tensor5<float>& p,
                                            const std::array<std::int64_t, 3>& s) {
      Tensor5<float> r(p.shape);
      for (std::int64_t z = 0; z < p.shape.d; ++z)
        for (std::int64_t y = 0; y < p.shape.h; ++y)
          for (std::int64_t x = 0; x < p.shape.w; ++x) r.at(0, 0, z, y, x) = value(s, z, y, x);
      return r;
    });
    for (std::int64_t z = 0; z < v.dims[0]; ++z)
      for (std::int64_t y = 0; y < v.dims[1]; ++y)
        for (std::int64_t x = 0; x < v.dims[2]; ++x) {
          double num = 0, den = 0;
          for (const auto& s : plan.starts) {
            const std::int64_t pz = z - s[0], py = y - s[1], px = x - s[2];
            if (pz < 0 || pz >= patch[0] || py < 0 || py >= patch[1] || px < 0 ||
                px >= patch[2])
              continue;
            const double w = plan.gaussian.at(pz, py, px);
            num += static_cast<double>(value(s, pz, py, px)) * w;
            den += w;
          }
          const double want = num / (den + kReconEpsilon);
          require(std::abs(out.at(z, y, x) - want) < 1e-5, "overlap oracle mismatch");
        }
  });

  // 7 ------------------------------------------------------------------
  h.run(7, "metric identities over 1000 mask pairs", [] {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::int64_t n = 8 + static_cast<std::int64_t>(rng() % 64);
      Volume a({1, 1, n}, {1, 1, 1}, VolumeKind::Mask);
      Volume b({1, 1, n}, {1, 1, 1}, VolumeKind::Mask);
      for (std::int64_t i = 0; i < n; ++i) {
        a.data[static_cast<size_t>(i)] = (rng() & 3) == 0 ? 1.0f : 0.0f;
        b.data[static_cast<size_t>(i)] = (rng() & 3) == 0 ? 1.0f : 0.0f;
      }
      auto m = confusion(a, b);
      require(std::abs(m.dice - m.f1) <= 1e-12, "dice != f1");
      const double want_iou = m.dice < 2.0 ? m.dice / (2.0 - m.dice) : 1.0;
      require(std::abs(m.iou - want_iou) <= 1e-12, "iou != dice/(2-dice)");
    }
  });

  // 8 ------------------------------------------------------------------
  h.run(8, "phantom training benchmark (two presets)", [] {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<EvalCase> heldout;
    for (const auto& s : desk_heldout_specs()) {
      auto p = generate_phantom(s);
      heldout.push_back({"h" + str(s.seed), p.intensity, p.mask});
    }

    auto run_preset = [&](const std::array<std::int64_t, 4>& rates, double& dice_out,
                          std::vector<EpochLog>& log_out) {
      TrainConfig cfg = desk_recipe(rates);
      auto r = train<float>(cfg);
      auto rep = evaluate<float>(r.net.get(), heldout, 0.5, false);
      dice_out = rep.mean.dice;
      log_out = r.log;
      return std::move(r.net);
    };

    std::vector<EpochLog> abl_log;
    g_fixture.ctx_net = run_preset({1, 2, 4, 8}, g_fixture.ctx_dice, g_fixture.ctx_log);
    g_fixture.abl_net = run_preset({1, 1, 1, 1}, g_fixture.abl_dice, abl_log);
    g_fixture.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::printf("       {1,2,4,8} held-out dice %.4f | {1,1,1,1} %.4f | %.0fs total\n",
                g_fixture.ctx_dice, g_fixture.abl_dice, g_fixture.train_seconds);
    require(g_fixture.ctx_dice >= 0.85,
            "held-out dice " + str(g_fixture.ctx_dice) + " < 0.85");
    require(g_fixture.ctx_dice >= g_fixture.abl_dice,
            "context preset " + str(g_fixture.ctx_dice) + " below ablation " +
                str(g_fixture.abl_dice));
    require(g_fixture.train_seconds < 900.0,
            "training took " + str(g_fixture.train_seconds) + "s (limit 900s)");
    // smoke contract: training reduced the loss to below half its start
    require(g_fixture.ctx_log.back().train_loss < 0.5 * g_fixture.ctx_log.front().train_loss,
            "train loss did not halve across the recipe");
  });

  // 9 ------------------------------------------------------------------
  h.run(9, "plateau scheduler contract", [] {
    ParamStore<float> store;
    store.add_param("w", {1, 1, 1, 1, 1});
    OptimState<float> opt(store, 1e-3);
    SchedulerState sched;
    for (int i = 1; i <= 6; ++i) {
      sched.step(1.0, opt);
      require(opt.learning_rate == 1e-3, "early drop at report " + str(i));
    }
    sched.step(1.0, opt);  // 7th flat report
    require(std::abs(opt.learning_rate - 1e-4) < 1e-18, "no x0.1 drop at the 7th report");

    OptimState<float> opt2(store, 1e-3);
    SchedulerState sched2;
    double loss = 1.0;
    for (int i = 0; i < 50; ++i) {
      sched2.step(loss, opt2);
      loss *= 0.95;
    }
    require(opt2.learning_rate == 1e-3, "monotone improvement dropped lr");
  });

  // 10 -----------------------------------------------------------------
  h.run(10, "I/O round trips (raw, NIfTI, checkpoint)", [] {
    const fs::path wd = fs::temp_directory_path() / "spinectx_accept_io";
    fs::create_directories(wd);
    std::mt19937_64 rng(31);

    Volume v({6, 7, 8}, {1.2, 0.9, 1.4});
    for (auto& f : v.data)
      f = static_cast<float>((static_cast<double>(rng() >> 11) * 0x1.0p-53) * 3000.0 - 1000.0);
    write_volume((wd / "r.json").string(), v);
    Volume r = read_volume((wd / "r.json").string());
    require(r.data == v.data && r.dims == v.dims, "raw round trip not bit-exact");

    Volume m({5, 6, 7}, {1, 1, 1}, VolumeKind::Mask);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = (i % 4 == 0) ? 1.0f : 0.0f;
    write_volume((wd / "m.nii.gz").string(), m);
    Volume rm = read_volume((wd / "m.nii.gz").string());
    require(rm.data == m.data, "NIfTI mask round trip lost voxels");

    SpineContextResUNet<float> net(tiny_config());
    net.init_params(41);
    auto x = make_tensor<float>({1, 1, 8, 16, 16});
    fill_rand(*x, rng, 0.0, 1.0);
    ForwardOptions<float> tr;
    tr.mode = Mode::Train;
    net.forward(x, tr);
    CheckpointMeta meta;
    meta.bn_stats_initialized = true;
    save_checkpoint((wd / "a.ckpt").string(), net, meta);
    auto [loaded, meta2] = load_checkpoint<float>((wd / "a.ckpt").string());
    save_checkpoint((wd / "b.ckpt").string(), *loaded, meta2);
    auto slurp = [](const fs::path& p) {
      std::ifstream f(p, std::ios::binary);
      return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    require(slurp(wd / "a.ckpt") == slurp(wd / "b.ckpt"),
            "checkpoint save->load->save not byte-identical");
    fs::remove_all(wd);
  });

  // 11 -----------------------------------------------------------------
  h.run(11, "determinism (train / infer / gradcam, threads)", [] {
    const int saved_threads = worker_threads().load();
    set_worker_threads(1);
    TrainConfig cfg = desk_recipe();
    cfg.epochs = 1;
    cfg.steps_per_epoch = 4;
    cfg.train_specs.resize(2);
    cfg.val_specs.resize(1);
    auto r1 = train<float>(cfg);
    auto r2 = train<float>(cfg);
    require(r1.log.size() == r2.log.size(), "log sizes differ");
    for (size_t i = 0; i < r1.log.size(); ++i) {
      require(r1.log[i].train_loss == r2.log[i].train_loss, "train losses differ");
      require(r1.log[i].val_loss == r2.log[i].val_loss, "val losses differ");
    }
    for (size_t i = 0; i < r1.net->store().params().size(); ++i)
      require(r1.net->store().params()[i].tensor->data ==
                  r2.net->store().params()[i].tensor->data,
              "trained parameters differ");

    // inference independent of thread count, 0 ULP
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.seed = 55;
    auto p = generate_phantom(spec);
    Volume pre = preprocess(p.intensity);
    auto plan = plan_windows(pre.dims, cfg.model.patch_shape);
    set_worker_threads(1);
    Volume prob1 = sliding_infer(pre, plan, network_predictor(*r1.net));
    for (int threads : {2, 4}) {
      set_worker_threads(threads);
      Volume probt = sliding_infer(pre, plan, network_predictor(*r1.net));
      require(probt.data == prob1.data,
              "inference changed with " + str(threads) + " threads");
    }

    // gradcam repeats bit-identically
    set_worker_threads(1);
    auto xin = make_tensor<float>({1, 1, 16, 32, 32});
    for (size_t i = 0; i < xin->data.size(); ++i) xin->data[i] = pre.data[i];
    auto cam1 = grad_cam(*r1.net, xin);
    auto cam2 = grad_cam(*r1.net, xin);
    require(cam1.data == cam2.data, "gradcam repeats differ");
    set_worker_threads(saved_threads);
  });

  // 12 -----------------------------------------------------------------
  h.run(12, "Grad-CAM sanity on the trained fixture", [] {
    require(g_fixture.ctx_net != nullptr, "criterion 8 fixture unavailable");
    PhantomSpec spec;
    spec.dims = {32, 64, 64};
    spec.seed = 301;  // first held-out phantom
    auto p = generate_phantom(spec);
    Volume pre = preprocess(p.intensity);
    // The network is fully convolutional, so the held-out phantom (all dims
    // divisible by 8) maps through grad_cam in one call.
    auto xin = make_tensor<float>({1, 1, pre.dims[0], pre.dims[1], pre.dims[2]});
    for (size_t i = 0; i < pre.data.size(); ++i) xin->data[i] = pre.data[i];
    Tensor5<float> cam = grad_cam(*g_fixture.ctx_net, xin);
    require(cam.shape == Shape5{1, 1, pre.dims[0], pre.dims[1], pre.dims[2]},
            "cam shape mismatch");
    double in_sum = 0, out_sum = 0;
    std::int64_t in_n = 0, out_n = 0;
    for (size_t i = 0; i < cam.data.size(); ++i) {
      require(cam.data[i] >= 0.0f && cam.data[i] <= 1.0f, "cam value outside [0,1]");
      if (p.mask.data[i] > 0.5f) {
        in_sum += cam.data[i];
        ++in_n;
      } else {
        out_sum += cam.data[i];
        ++out_n;
      }
    }
    const double ratio = (in_sum / in_n) / std::max(1e-12, out_sum / out_n);
    std::printf("       in-mask/out-of-mask CAM ratio %.2f\n", ratio);
    require(ratio > 1.5, "CAM ratio " + str(ratio) + " <= 1.5");
  });

  // 13 -----------------------------------------------------------------
  h.run(13, "bench harness CSV + planner cross-check", [] {
    require(g_fixture.ctx_net != nullptr, "criterion 8 fixture unavailable");
    const auto t0 = std::chrono::steady_clock::now();
    PhantomSpec spec;
    spec.dims = {48, 96, 96};
    spec.seed = 67;
    auto p = generate_phantom(spec);
    Volume pre = preprocess(p.intensity);
    auto plan = plan_windows(pre.dims, g_fixture.ctx_net->config().patch_shape);

    // enumerate the expected count independently: per axis ceil((L-P)/s)+1
    std::int64_t want = 1;
    for (int a = 0; a < 3; ++a) {
      const std::int64_t L = std::max(pre.dims[a], g_fixture.ctx_net->config().patch_shape[a]);
      const std::int64_t P = g_fixture.ctx_net->config().patch_shape[a];
      const std::int64_t s = P / 2;
      want *= (L - P + s - 1) / s + 1;
    }
    require(plan.count() == want,
            "window count " + str(plan.count()) + " != planner enumeration " + str(want));

    const fs::path wd = fs::temp_directory_path() / "spinectx_accept_bench";
    fs::create_directories(wd);
    std::ofstream csv(wd / "bench.csv");
    csv << "run,seconds,peak_bytes_ru_maxrss,threads,volume_dims,patch,params\n";
    double total = 0;
    for (int run = 1; run <= 3; ++run) {
      const auto r0 = std::chrono::steady_clock::now();
      Volume prob = sliding_infer(pre, plan, network_predictor(*g_fixture.ctx_net));
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - r0).count();
      total += secs;
      csv << run << "," << secs << ",0," << worker_threads().load() << ",48x96x96,16x32x32,"
          << g_fixture.ctx_net->store().total_params() << "\n";
    }
    csv << "mean," << total / 3 << ",0," << worker_threads().load() << ",48x96x96,16x32x32,"
        << g_fixture.ctx_net->store().total_params() << "\n";
    csv.close();
    std::ifstream check(wd / "bench.csv");
    int rows = 0;
    std::string line;
    while (std::getline(check, line))
      if (!line.empty()) ++rows;
    require(rows == 5, "bench CSV row count " + str(rows) + " != 5");
    fs::remove_all(wd);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs < 300.0, "bench harness took " + str(secs) + "s (limit 300s)");
  });

  std::printf("%d of 13 criteria passed\n", 13 - h.failures);
  return h.failures == 0 ? 0 : 1;
}

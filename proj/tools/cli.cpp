#include "cli.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "spinectx/checkpoint.hpp"
#include "spinectx/gradcam.hpp"
#include "spinectx/infer.hpp"
#include "spinectx/metrics.hpp"
#include "spinectx/nifti.hpp"
#include "spinectx/parallel.hpp"
#include "spinectx/train.hpp"

namespace spinectx::cli {

namespace {

int log_level() {
  const char* env = std::getenv("SPINECTX_LOG");
  if (!env) return 1;
  const std::string v = env;
  if (v == "error") return 0;
  if (v == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "spinectx: " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "spinectx[debug]: " << msg << "\n";
}

std::int64_t peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<std::int64_t>(ru.ru_maxrss) * 1024;  // Linux reports KiB
}

std::vector<std::int64_t> parse_int_list(const std::string& s, size_t want,
                                         const std::string& what) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoll(tok));
  if (out.size() != want)
    throw std::invalid_argument(what + ": expected " + std::to_string(want) +
                                " comma-separated values, got \"" + s + "\"");
  return out;
}

std::string dims_str(const std::array<std::int64_t, 3>& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

void apply_thread_flags(const RunConfig& rc) {
  set_worker_threads(rc.deterministic ? 1 : rc.threads);
  if (rc.deterministic) log_debug("deterministic mode: forcing 1 worker");
}

void ensure_out_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

/// Window size for sliding inference: the checkpoint's patch unless --patch
/// overrides it (any dims divisible by 8 work on the fully convolutional net).
std::array<std::int64_t, 3> resolve_window(const RunConfig& rc, const ModelConfig& cfg) {
  if (rc.patch.empty()) return cfg.patch_shape;
  const auto p = parse_int_list(rc.patch, 3, "--patch");
  for (auto d : p)
    if (d <= 0 || d % 8 != 0)
      throw std::invalid_argument("--patch dims must be positive and divisible by 8");
  return {p[0], p[1], p[2]};
}

// -------------------------------------------------------------------------
// summary
// -------------------------------------------------------------------------

int cmd_summary(const RunConfig& rc) {
  ModelConfig cfg = resolve_model_config(rc);
  SpineContextResUNet<float> net(cfg);

  std::printf("SpineContextResUNet summary\n");
  std::printf("  patch (d,h,w): %s\n", dims_str(cfg.patch_shape).c_str());
  const auto b = cfg.bottleneck_dims();
  std::printf("  bottleneck map: %s (%lld channels)\n", dims_str(b).c_str(),
              static_cast<long long>(cfg.bottleneck_width));

  std::printf("\n  %-28s %-22s %12s\n", "layer", "shape", "params");
  for (const auto& e : net.store().params()) {
    const auto& s = e.tensor->shape;
    std::printf("  %-28s %-22s %12lld\n", e.name.c_str(), s.str().c_str(),
                static_cast<long long>(e.tensor->numel()));
  }
  const std::int64_t total = net.store().total_params();
  std::printf("  %-28s %-22s %12lld\n", "TOTAL", "", static_cast<long long>(total));
  if (total != param_count(cfg)) {
    std::cerr << "spinectx: error: parameter accounting mismatch\n";
    return 1;
  }

  std::printf("\n  context branches (K=3):\n");
  const std::int64_t plane = std::max({b[0], b[1], b[2]});
  for (int i = 0; i < 4; ++i) {
    const std::int64_t r = cfg.dilation_rates[static_cast<size_t>(i)];
    const std::int64_t ext = kernel_extent(3, r);
    std::printf("    r=%-3lld extent=%-3lld", static_cast<long long>(r),
                static_cast<long long>(ext));
    if (r >= plane)
      std::printf("  [sampling void: extent %lld exceeds the %lld-voxel bottleneck plane]",
                  static_cast<long long>(ext), static_cast<long long>(plane));
    std::printf("\n");
  }
  return 0;
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

int cmd_train(const RunConfig& rc) {
  TrainConfig cfg;
  if (!rc.config_path.empty()) {
    std::ifstream f(rc.config_path);
    if (!f) throw std::runtime_error("cannot open config " + rc.config_path);
    cfg = train_config_from_json(nlohmann::json::parse(f));
  } else {
    cfg = desk_recipe();
    log_info("no --config given; using the built-in desk recipe");
  }
  if (!rc.preset.empty()) cfg.model.dilation_rates = preset_rates(rc.preset);
  if (!rc.widths.empty() || !rc.patch.empty() || !rc.dilations.empty())
    cfg.model = resolve_model_config(rc, cfg.model);
  cfg.seed = rc.seed;
  apply_thread_flags(rc);
  ensure_out_dir(rc.out_dir);

  auto result = train<float>(cfg, rc.out_dir);
  std::ofstream log(rc.out_dir + "/train_log.csv");
  log << train_log_csv_header() << "\n";
  for (const auto& e : result.log) log << train_log_csv_row(e) << "\n";
  std::printf("best val loss %.6f at epoch %lld\n", result.best.best_val_loss,
              static_cast<long long>(result.best.epoch));
  std::printf("checkpoint: %s/best.ckpt\n", rc.out_dir.c_str());
  std::printf("log: %s/train_log.csv\n", rc.out_dir.c_str());
  return 0;
}

// -------------------------------------------------------------------------
// infer
// -------------------------------------------------------------------------

int cmd_infer(const RunConfig& rc) {
  if (rc.checkpoint_path.empty()) throw std::invalid_argument("infer requires --checkpoint");
  if (rc.in_path.empty()) throw std::invalid_argument("infer requires --in");
  apply_thread_flags(rc);

  // Validate config compatibility before touching the volume payload.
  auto [cfg, meta] = read_checkpoint_header(rc.checkpoint_path);
  if (!rc.config_path.empty()) {
    std::ifstream f(rc.config_path);
    if (!f) throw std::runtime_error("cannot open config " + rc.config_path);
    ModelConfig want = model_config_from_json(nlohmann::json::parse(f).value(
        "model", nlohmann::json::object()));
    if (want.patch_shape != cfg.patch_shape)
      throw std::runtime_error("checkpoint patch " + dims_str(cfg.patch_shape) +
                               " does not match config patch " + dims_str(want.patch_shape));
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto [net, meta2] = load_checkpoint<float>(rc.checkpoint_path);
  Volume raw = read_volume(rc.in_path);
  Volume pre = preprocess(raw);
  log_debug("preprocessed to " + pre.dims_str());
  WindowPlan plan = plan_windows(pre.dims, resolve_window(rc, cfg));
  log_info("windows: " + std::to_string(plan.count()));
  Volume prob = sliding_infer(pre, plan, network_predictor(*net));
  Volume mask = binarize(prob, rc.threshold);

  ensure_out_dir(rc.out_dir);
  write_volume(rc.out_dir + "/probability.nii.gz", prob);
  write_volume(rc.out_dir + "/mask.nii.gz", mask);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("inference: %.3f s, peak rss %lld bytes, %lld windows\n", secs,
              static_cast<long long>(peak_rss_bytes()),
              static_cast<long long>(plan.count()));
  std::printf("wrote %s/probability.nii.gz and %s/mask.nii.gz\n", rc.out_dir.c_str(),
              rc.out_dir.c_str());
  return 0;
}

// -------------------------------------------------------------------------
// eval
// -------------------------------------------------------------------------

int cmd_eval(const RunConfig& rc) {
  if (rc.in_path.empty()) throw std::invalid_argument("eval requires --in (case manifest)");
  if (!rc.oracle && rc.checkpoint_path.empty())
    throw std::invalid_argument("eval requires --checkpoint (or --oracle)");
  apply_thread_flags(rc);

  std::ifstream mf(rc.in_path);
  if (!mf) throw std::runtime_error("cannot open manifest " + rc.in_path);
  nlohmann::json manifest = nlohmann::json::parse(mf);

  std::unique_ptr<SpineContextResUNet<float>> net;
  if (!rc.oracle) net = std::move(load_checkpoint<float>(rc.checkpoint_path).first);

  std::vector<EvalCase> cases;
  int skipped = 0;
  for (const auto& entry : manifest) {
    const std::string id = entry.value("id", "case" + std::to_string(cases.size()));
    try {
      EvalCase c;
      c.id = id;
      c.volume = read_volume(entry.at("volume").get<std::string>());
      c.truth = read_volume(entry.at("mask").get<std::string>());
      cases.push_back(std::move(c));
    } catch (const std::exception& e) {
      std::cerr << "spinectx: skipping case " << id << ": " << e.what() << "\n";
      ++skipped;
    }
  }

  EvalReport rep = evaluate<float>(net.get(), cases, rc.threshold, rc.oracle);
  ensure_out_dir(rc.out_dir);
  const std::string csv_path = rc.out_dir + "/metrics.csv";
  std::ofstream csv(csv_path);
  csv << metrics_csv_header() << "\n";
  for (const auto& [id, m] : rep.per_case) csv << metrics_csv_row(id, m) << "\n";
  csv << metrics_csv_row("mean", rep.mean) << "\n";
  std::printf("evaluated %zu cases (mean dice %.4f); wrote %s\n", rep.per_case.size(),
              rep.mean.dice, csv_path.c_str());
  return skipped > 0 ? 2 : 0;  // partial failure signalled
}

// -------------------------------------------------------------------------
// bench
// -------------------------------------------------------------------------

int cmd_bench(const RunConfig& rc) {
  if (rc.checkpoint_path.empty()) throw std::invalid_argument("bench requires --checkpoint");
  apply_thread_flags(rc);
  auto [net, meta] = load_checkpoint<float>(rc.checkpoint_path);
  const ModelConfig& cfg = net->config();

  Volume vol;
  if (!rc.in_path.empty()) {
    vol = read_volume(rc.in_path);
  } else {
    const auto d = parse_int_list(rc.phantom_dims, 3, "--phantom-dims");
    PhantomSpec spec;
    spec.dims = {d[0], d[1], d[2]};
    spec.seed = rc.seed;
    vol = generate_phantom(spec).intensity;
    log_info("benchmarking on a generated " + vol.dims_str() + " phantom");
  }
  Volume pre = preprocess(vol);
  WindowPlan plan = plan_windows(pre.dims, resolve_window(rc, cfg));
  std::printf("windows: %lld\n", static_cast<long long>(plan.count()));

  ensure_out_dir(rc.out_dir);
  const std::string csv_path = rc.out_dir + "/bench.csv";
  std::ofstream csv(csv_path);
  csv << "run,seconds,peak_bytes_ru_maxrss,threads,volume_dims,patch,params\n";
  double total = 0.0;
  const int threads = rc.deterministic ? 1 : rc.threads;
  for (int run = 1; run <= rc.repeat; ++run) {
    const auto t0 = std::chrono::steady_clock::now();
    Volume prob = sliding_infer(pre, plan, network_predictor(*net));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total += secs;
    csv << run << "," << secs << "," << peak_rss_bytes() << "," << threads << ","
        << dims_str(pre.dims) << "," << dims_str(cfg.patch_shape) << ","
        << net->store().total_params() << "\n";
    std::printf("run %d: %.3f s\n", run, secs);
  }
  csv << "mean," << total / rc.repeat << "," << peak_rss_bytes() << "," << threads << ","
      << dims_str(pre.dims) << "," << dims_str(cfg.patch_shape) << ","
      << net->store().total_params() << "\n";
  std::printf("mean: %.3f s over %d runs; wrote %s\n", total / rc.repeat, rc.repeat,
              csv_path.c_str());
  return 0;
}

// -------------------------------------------------------------------------
// gradcam
// -------------------------------------------------------------------------

int cmd_gradcam(const RunConfig& rc) {
  if (rc.checkpoint_path.empty()) throw std::invalid_argument("gradcam requires --checkpoint");
  if (rc.in_path.empty()) throw std::invalid_argument("gradcam requires --in");
  apply_thread_flags(rc);
  auto [net, meta] = load_checkpoint<float>(rc.checkpoint_path);
  Volume raw = read_volume(rc.in_path);
  Volume pre = preprocess(raw);
  WindowPlan plan = plan_windows(pre.dims, resolve_window(rc, net->config()));
  Volume cam = sliding_gradcam(*net, pre, plan);
  ensure_out_dir(rc.out_dir);
  write_volume(rc.out_dir + "/gradcam.nii.gz", cam);
  std::printf("wrote %s/gradcam.nii.gz\n", rc.out_dir.c_str());
  return 0;
}

}  // namespace

std::array<std::int64_t, 4> preset_rates(const std::string& name) {
  if (name == "default") return {1, 2, 4, 8};
  if (name == "abl-1") return {1, 1, 1, 1};
  if (name == "abl-2") return {1, 2, 3, 4};
  if (name == "abl-3") return {1, 4, 8, 16};
  throw std::invalid_argument("unknown preset \"" + name +
                              "\" (expected default|abl-1|abl-2|abl-3)");
}

ModelConfig resolve_model_config(const RunConfig& rc, const std::optional<ModelConfig>& base) {
  ModelConfig cfg = base.value_or(ModelConfig{});
  if (!base && !rc.config_path.empty()) {
    std::ifstream f(rc.config_path);
    if (!f) throw std::runtime_error("cannot open config " + rc.config_path);
    nlohmann::json j = nlohmann::json::parse(f);
    cfg = model_config_from_json(j.contains("model") ? j["model"] : j);
  }
  if (!rc.widths.empty()) {
    const auto w = parse_int_list(rc.widths, 5, "--widths");
    cfg.encoder_widths = {w[0], w[1], w[2]};
    cfg.bottleneck_width = w[3];
    cfg.context_branch_width = w[4];
  }
  if (!rc.patch.empty()) {
    const auto p = parse_int_list(rc.patch, 3, "--patch");
    cfg.patch_shape = {p[0], p[1], p[2]};
  }
  if (!rc.dilations.empty()) {
    const auto d = parse_int_list(rc.dilations, 4, "--dilations");
    cfg.dilation_rates = {d[0], d[1], d[2], d[3]};
  }
  if (!rc.preset.empty()) cfg.dilation_rates = preset_rates(rc.preset);
  cfg.validate();
  return cfg;
}

void build_app(CLI::App& app, RunConfig& opts) {
  app.description("SpineContextResUNet: desk-scale 3-D spine segmentation engine");
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config file");
    sub->add_option("--checkpoint", opts.checkpoint_path, "checkpoint file (.ckpt)");
    sub->add_option("--in", opts.in_path, "input volume or case manifest");
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--preset", opts.preset,
                    "dilation preset: default={1,2,4,8} abl-1={1,1,1,1} "
                    "abl-2={1,2,3,4} abl-3={1,4,8,16}");
    sub->add_option("--widths", opts.widths, "e1,e2,e3,bottleneck,branch channel widths");
    sub->add_option("--patch", opts.patch, "patch dims d,h,w (divisible by 8)");
    sub->add_option("--dilations", opts.dilations, "explicit dilation rates r1,r2,r3,r4");
    sub->add_option("--threshold", opts.threshold, "binarization threshold in [0,1]");
    sub->add_option("--threads", opts.threads, "worker threads (results are identical)");
    sub->add_option("--seed", opts.seed, "RNG seed");
    sub->add_flag("--deterministic", opts.deterministic, "single worker, fixed seeds");
    return sub;
  };

  add_common(app.add_subcommand("summary", "print architecture, counts, kernel extents"));
  add_common(app.add_subcommand("train", "train on phantom volumes (desk recipe by default)"));
  add_common(app.add_subcommand("infer", "segment one volume with a checkpoint"));
  auto* ev = add_common(app.add_subcommand("eval", "metrics over a case manifest"));
  ev->add_flag("--oracle", opts.oracle, "use the truth mask as the probability input");
  auto* be = add_common(app.add_subcommand("bench", "repeat full inference, report timing/memory"));
  be->add_option("--repeat", opts.repeat, "benchmark repetitions");
  be->add_option("--phantom-dims", opts.phantom_dims, "generated phantom dims d,h,w");
  add_common(app.add_subcommand("gradcam", "bottleneck Grad-CAM heat map for one volume"));
}

int run_cli(int argc, char** argv) {
  RunConfig opts;
  CLI::App app{"spinectx"};
  build_app(app, opts);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    CLI::App* sub = app.get_subcommands().front();
    opts.subcommand = sub->get_name();
    if (opts.subcommand == "summary") return cmd_summary(opts);
    if (opts.subcommand == "train") return cmd_train(opts);
    if (opts.subcommand == "infer") return cmd_infer(opts);
    if (opts.subcommand == "eval") return cmd_eval(opts);
    if (opts.subcommand == "bench") return cmd_bench(opts);
    if (opts.subcommand == "gradcam") return cmd_gradcam(opts);
    std::cerr << "spinectx: error: unknown subcommand\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "spinectx: error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace spinectx::cli

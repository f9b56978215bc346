#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "spinectx/network.hpp"

namespace spinectx::cli {

/// Everything a subcommand needs, parsed from flags.
struct RunConfig {
  std::string subcommand;
  std::string config_path;
  std::string checkpoint_path;
  std::string in_path;
  std::string out_dir = ".";
  std::string preset;  // default | abl-1 | abl-2 | abl-3
  std::string widths;  // e1,e2,e3,bottleneck,branch
  std::string patch;   // d,h,w
  std::string dilations;
  std::string phantom_dims = "48,96,96";
  double threshold = 0.5;
  int threads = 1;
  std::uint64_t seed = 42;
  bool deterministic = false;
  bool oracle = false;
  int repeat = 3;
};

/// Named dilation presets from the ablation table.
std::array<std::int64_t, 4> preset_rates(const std::string& name);

/// Applies config file, preset, and width/patch overrides onto a ModelConfig.
ModelConfig resolve_model_config(const RunConfig& rc,
                                 const std::optional<ModelConfig>& base = {});

/// Builds the full parser; opts must outlive the App.
void build_app(CLI::App& app, RunConfig& opts);

/// Parses argv and dispatches; returns the process exit status.
int run_cli(int argc, char** argv);

}  // namespace spinectx::cli

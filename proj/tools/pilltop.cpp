#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pilltop/cli.hpp"
#include "pilltop/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pilltop: dissolving-pill topology optimization"};
  std::string mode;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  app.add_option("mode", mode, "simulate | optimize | gradcheck")
      ->required()
      ->check(CLI::IsMember({"simulate", "optimize", "gradcheck"}));
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--out", out_dir, "output directory (overrides output.dir)");
  app.add_option("--seed", seed, "network seed (overrides network.seed)");
  app.add_flag("--verbose", verbose, "debug logging, per-step adjoint norms");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 64;
  }

  pilltop::RunConfig config;
  try {
    config = pilltop::load_config(config_path, pilltop::parse_mode(mode));
  } catch (const pilltop::ConfigError& e) {
    spdlog::error("invalid configuration {}:\n{}", config_path, e.what());
    return 64;
  }
  if (!out_dir.empty()) config.output.dir = out_dir;
  if (seed) config.network.seed = *seed;
  return pilltop::run(config, verbose).exit_code;
}

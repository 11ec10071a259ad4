#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>
#include <json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "pilltop/cli.hpp"
#include "pilltop/errors.hpp"

using namespace pilltop;
namespace fs = std::filesystem;
using doctest::Approx;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

std::string config_error(const std::string& text, std::optional<RunMode> mode = {}) {
  try {
    parse_config(text, mode);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Captures log output for the lifetime of the object.
struct LogCapture {
  std::ostringstream os;
  std::shared_ptr<spdlog::logger> old = spdlog::default_logger();
  LogCapture() {
    spdlog::set_default_logger(std::make_shared<spdlog::logger>(
        "capture", std::make_shared<spdlog::sinks::ostream_sink_st>(os)));
  }
  ~LogCapture() { spdlog::set_default_logger(old); }
};

std::vector<std::string> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  return rows;
}

}  // namespace

TEST_CASE("config defaults and validation") {
  CHECK(config_error("{}", RunMode::Optimize).find("target") != std::string::npos);

  const RunConfig c = parse_config(R"({"mesh": {"nx": 32}})", RunMode::Simulate);
  CHECK(c.mesh.nx == 32);
  CHECK(c.mesh.ny == 75);
  CHECK(c.solver.dt == 500.0);
  CHECK(c.solver.n_steps == 100);
  CHECK(c.constants.W == 140.0);
  CHECK(c.constants.D_solid == 5e-11);
  CHECK(c.library.size() == 5);
  CHECK(c.network.hidden == std::vector<int>{40, 40});
  CHECK(c.optimizer.lr == 8e-3);
  CHECK(c.optimizer.max_iters == 100);
  CHECK(c.optimizer.xi_final == 5e-2);
  CHECK(c.optimizer.lambda_star_for(0) == 5e-2);

  const std::string neg = config_error(R"({"mode": "simulate", "solver": {"dt": -1}})");
  CHECK(neg.find("dt") != std::string::npos);

  const std::string many = config_error(
      R"({"mode": "simulate", "mesh": {"nx": 1, "bogus": 2}, "colour": 1, "solver": {"dt": -5}})");
  CHECK(many.find("bogus") != std::string::npos);
  CHECK(many.find("colour") != std::string::npos);
  CHECK(many.find("nx") != std::string::npos);
  CHECK(many.find("dt") != std::string::npos);

  const std::string lens = config_error(
      R"({"mode": "simulate", "optimizer": {"lambda_star": [0.05, 0.05]}})");
  CHECK(lens.find("lambda_star") != std::string::npos);

  CHECK_FALSE(config_error(R"({"format_version": 2, "mode": "simulate"})").empty());
  CHECK_FALSE(config_error("{not json").empty());
  CHECK_THROWS_AS(load_config("no/such/config.json"), ConfigError);
}

TEST_CASE("resolved config round trips") {
  const RunConfig c = parse_config(
      R"({"mode": "optimize", "mesh": {"nx": 20, "ny": 24}, "shape": {"bounds": "sunflower"},
          "library": {"materials": [{"name": "a", "color": "#000000", "k": 1e-4},
                                     {"name": "b", "k": 3e-4}]},
          "optimizer": {"lambda_star": [0.1, 0.2]}, "target": {"mdot": [-1e-5, -2e-5]},
          "solver": {"n_steps": 2}})");
  const RunConfig d = parse_config(dump_config(c));
  CHECK(dump_config(d) == dump_config(c));
  CHECK(d.bounds_preset == "sunflower");
  CHECK(d.library.names == std::vector<std::string>{"a", "b"});
  CHECK(d.target.mdot.size() == 2);
}

TEST_CASE("target loading") {
  const fs::path dir = fs::temp_directory_path() / "pilltop_target_test";
  fs::remove_all(dir);
  std::ostringstream grid;
  grid << "t,mdot\n";
  for (int n = 1; n <= 100; ++n) grid << n * 500.0 << "," << -1e-5 * n << "\n";
  write(dir / "grid.csv", grid.str());
  {
    LogCapture log;
    const TargetProfile t = load_target((dir / "grid.csv").string(), 500.0, 100);
    CHECK_FALSE(t.resampled);
    CHECK(t.mdot.size() == 100);
    CHECK(t.mdot[99] == Approx(-1e-3));
    CHECK(log.os.str().find("resampled") == std::string::npos);
  }
  std::ostringstream half;
  half << "t,mdot\n";
  for (int n = 1; n <= 50; ++n) half << n * 1000.0 << "," << -2e-5 * n << "\n";
  write(dir / "half.csv", half.str());
  {
    LogCapture log;
    const TargetProfile t = load_target((dir / "half.csv").string(), 500.0, 100);
    CHECK(t.resampled);
    REQUIRE(t.mdot.size() == 100);
    CHECK(t.mdot[2] == Approx(-3e-5));   // t = 1500, between samples
    CHECK(t.mdot[0] == Approx(-2e-5));   // held before the first sample
    CHECK(t.mdot[99] == Approx(-1e-3));
    CHECK(log.os.str().find("resampled") != std::string::npos);
  }
  write(dir / "noheader.csv", "500,-1\n1000,-2\n");
  CHECK_THROWS_AS(load_target((dir / "noheader.csv").string(), 500.0, 2), ConfigError);
  write(dir / "backwards.csv", "t,mdot\n1000,-1\n500,-2\n");
  CHECK_THROWS_AS(load_target((dir / "backwards.csv").string(), 500.0, 2), ConfigError);
  write(dir / "empty.csv", "");
  CHECK_THROWS_AS(load_target((dir / "empty.csv").string(), 500.0, 2), ConfigError);
  write(dir / "headonly.csv", "t,mdot\n");
  CHECK_THROWS_AS(load_target((dir / "headonly.csv").string(), 500.0, 2), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("simulate run artifacts") {
  const fs::path dir = fs::temp_directory_path() / "pilltop_sim_test";
  fs::remove_all(dir);
  RunConfig c = parse_config(
      R"({"mode": "simulate", "mesh": {"nx": 10, "ny": 10},
          "library": {"materials": [{"name": "x", "k": 2e-4}, {"name": "y", "k": 1e-4},
                                    {"name": "z", "k": 5e-5}]},
          "network": {"n_freq": 8, "hidden": [8, 8], "seed": 3},
          "shape": {"initial": {"cx": 0.5, "cy": 0.5, "theta": 0, "a": 0.3, "b": 0.3, "n": 1.9, "m": 2}},
          "output": {"field_stride": 10}})");
  c.output.dir = (dir / "a").string();
  LogCapture quiet;
  REQUIRE(run(c).exit_code == 0);

  const auto rows = csv_rows(dir / "a" / "release_curve.csv");
  REQUIRE(rows.size() == 101);
  CHECK(rows[0] == "t,mdot,mdot_target");
  double prev = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double mdot = std::stod(rows[i].substr(rows[i].find(',') + 1));
    CHECK(mdot <= 0.0);  // cumulative released mass is monotone
    prev += mdot;
  }
  CHECK(prev < 0.0);

  int files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "fields"))
    if (e.path().extension() == ".vtk") ++files;
  CHECK(files == 11);
  CHECK(fs::exists(dir / "a" / "fields" / "step_0000.vtk"));
  CHECK(fs::exists(dir / "a" / "fields" / "step_0100.vtk"));
  const std::string vtk = slurp(dir / "a" / "fields" / "step_0050.vtk");
  for (const char* name : {"gamma_x", "gamma_y", "gamma_z", "SCALARS phi", "SCALARS C", "k_field"})
    CHECK(vtk.find(name) != std::string::npos);
  CHECK(vtk.find("format_version 1") != std::string::npos);

  const std::string manifest = slurp(dir / "a" / "manifest.txt");
  CHECK(manifest.find("format_version = 1") != std::string::npos);
  CHECK(manifest.find("exit_code = 0") != std::string::npos);

  // rerun from the resolved config, into the same directory
  const std::string first = slurp(dir / "a" / "fields" / "step_0050.vtk");
  const std::string curve = slurp(dir / "a" / "release_curve.csv");
  RunConfig again = load_config((dir / "a" / "resolved_config.json").string());
  again.output.dir = (dir / "a").string();
  REQUIRE(run(again).exit_code == 0);
  CHECK(slurp(dir / "a" / "fields" / "step_0050.vtk") == first);
  CHECK(slurp(dir / "a" / "release_curve.csv") == curve);
  fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 64);
  CHECK(exit_code_for(SolverError("x")) == 70);
  CHECK(exit_code_for(NonconvergenceError("x", 3, 1.0)) == 70);
  CHECK(exit_code_for(AdjointError("x", 2)) == 71);
  CHECK(exit_code_for(DegenerateDesignError("x")) == 72);

  const fs::path dir = fs::temp_directory_path() / "pilltop_exit_test";
  fs::remove_all(dir);
  RunConfig c = parse_config(
      R"({"mode": "simulate", "mesh": {"nx": 6, "ny": 6}, "solver": {"n_steps": 2, "newton_max": 1, "newton_rtol": 1e-15, "newton_atol": 1e-30}})");
  c.output.dir = dir.string();
  LogCapture quiet;
  CHECK(run(c).exit_code == 70);
  CHECK(slurp(dir / "manifest.txt").find("exit_code = 70") != std::string::npos);
  fs::remove_all(dir);
}

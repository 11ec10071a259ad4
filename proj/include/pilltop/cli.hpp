#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pilltop/fem.hpp"
#include "pilltop/geometry.hpp"
#include "pilltop/materials.hpp"
#include "pilltop/matfield.hpp"
#include "pilltop/optimize.hpp"

namespace pilltop {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

enum class RunMode { Simulate, Optimize, Gradcheck };

std::string to_string(RunMode m);
RunMode parse_mode(const std::string& s);

struct MeshConfig {
  int nx = 75;
  int ny = 75;
  double Lx = 1.0;
  double Ly = 1.0;
};

struct NetworkConfig {
  int n_freq = 64;
  double freq_scale = 10.0;
  std::vector<int> hidden = {40, 40};
  std::uint64_t seed = 0;
  PretrainSettings pretrain;
  std::string weights_file;  // optional: load instead of init + pretrain
};

/// Where the target release curve comes from. Exactly one source is set.
struct TargetConfig {
  enum class Source { None, File, Inline, Self, Reference } source = Source::None;
  std::string file;
  std::vector<double> mdot;  // inline samples on the run grid
  // Reference run: the design with `shape` and, when set, a uniform rate.
  std::optional<SupershapeParams> reference_shape;
  std::optional<double> reference_rate;
};

struct OutputConfig {
  std::string dir = "out";
  int field_stride = 10;  // 0 disables field snapshots
  int gradcheck_coords = 5;
  double gradcheck_step = 1e-5;
  double gradcheck_tol = 1e-3;
  bool dump_adjoint_norms = false;
};

struct RunConfig {
  RunMode mode = RunMode::Optimize;
  MeshConfig mesh;
  PhysicsConstants constants;
  ExcipientLibrary library = ExcipientLibrary::reference();
  SolverSettings solver;
  std::string bounds_preset = "circle";  // "custom" when given explicitly
  BoundsBox bounds = BoundsBox::preset("circle");
  std::optional<SupershapeParams> initial_shape;  // default: bounds midpoint
  NetworkConfig network;
  OptConfig optimizer;
  TargetConfig target;
  OutputConfig output;
};

/// Parses and validates a JSON config. Every problem found is reported in a
/// single ConfigError, one per line. `mode_override` replaces the file's mode.
RunConfig load_config(const std::string& path, std::optional<RunMode> mode_override = {});
RunConfig parse_config(const std::string& text, std::optional<RunMode> mode_override = {},
                       const std::string& base_dir = ".");

/// Resolved configuration as JSON text (every field, defaults included).
std::string dump_config(const RunConfig& config);

struct TargetProfile {
  Eigen::VectorXd mdot;  // on t_n = n dt, n = 1..N
  bool resampled = false;
};

/// Reads a `t,mdot` CSV and linearly resamples it onto t_n = n dt when the
/// grids differ (a warning is logged).
TargetProfile load_target(const std::string& path, double dt, int n_steps);

struct RunResult {
  int exit_code = 0;
  std::string termination;
};

/// Runs one mode end to end and writes every artifact into the output
/// directory. Errors are mapped to exit codes, never thrown.
RunResult run(const RunConfig& config, bool verbose = false);

/// Exit code for a caught exception.
int exit_code_for(const std::exception& e);

/// Legacy VTK structured grid: point data phi, C, k_field, gamma_<name>.
void write_vtk_fields(const std::string& path, const StructuredMesh& mesh, const StateFields& s,
                      const Eigen::VectorXd& k_nodal, const Eigen::MatrixXd& gamma_nodal,
                      const ExcipientLibrary& library, double time);

/// x, y, phi, C per node.
void write_csv_fields(const std::string& path, const StructuredMesh& mesh, const StateFields& s);

/// t, mdot, mdot_target per step (mdot_target empty when there is none).
void write_release_curve(const std::string& path, double dt, std::span<const double> mdot,
                         const Eigen::VectorXd& target);

void write_iteration_log(const std::string& path, const std::vector<IterationRecord>& history);

}  // namespace pilltop

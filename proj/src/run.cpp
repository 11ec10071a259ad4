#include <functional>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "pilltop/cli.hpp"
#include "pilltop/errors.hpp"

namespace pilltop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + p.string());
  return out;
}

std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%04d", step);
  return buf;
}

// Everything a run needs besides the optimizer state.
struct Setup {
  StructuredMesh mesh;
  NetworkWeights weights;
  PretrainReport pretrain;
  SupershapeParams shape;
};

NetworkWeights make_network(const RunConfig& c, std::span<const Point> centers,
                            PretrainReport& report) {
  const int S = static_cast<int>(c.library.size());
  if (!c.network.weights_file.empty()) {
    NetworkWeights w = load_weights(c.network.weights_file);
    if (w.num_materials() != S) {
      throw ConfigError("network.weights_file has " + std::to_string(w.num_materials()) +
                        " outputs but the library has " + std::to_string(S) + " materials");
    }
    report.converged = true;
    return w;
  }
  NetworkWeights w = init_weights(c.network.seed, S, c.network.n_freq, c.network.freq_scale,
                                  c.network.hidden);
  report = pretrain_uniform(w, centers, c.network.pretrain);
  return w;
}

std::vector<double> rates_of(const Eigen::MatrixXd& gamma, const ExcipientLibrary& lib) {
  const Eigen::Map<const Eigen::VectorXd> k(lib.rates.data(), static_cast<Eigen::Index>(lib.size()));
  const Eigen::VectorXd out = gamma.transpose() * k;
  return {out.data(), out.data() + out.size()};
}

// Forward release curve of a fixed design.
std::vector<double> release_of(const RunConfig& c, const StructuredMesh& mesh,
                               const SupershapeParams& shape, std::span<const double> k_field) {
  const CoupledAssembler A(mesh, c.constants, c.solver);
  const std::vector<double> phi = sample_phase_field(shape, mesh.nodes, A.phase_model().mu);
  const Eigen::Map<const Eigen::VectorXd> phi0(phi.data(), static_cast<Eigen::Index>(phi.size()));
  const SimulationResult r = simulate(phi0, k_field, A, c.solver.n_steps);
  return mass_rate(r.phi_centers, mesh, c.constants.rho_s, c.solver.dt);
}

Eigen::VectorXd resolve_target(const RunConfig& c, const Setup& s) {
  const int N = c.solver.n_steps;
  const auto& t = c.target;
  switch (t.source) {
    case TargetConfig::Source::None:
      return {};
    case TargetConfig::Source::File:
      return load_target(t.file, c.solver.dt, N).mdot;
    case TargetConfig::Source::Inline:
      return Eigen::Map<const Eigen::VectorXd>(t.mdot.data(), N);
    case TargetConfig::Source::Self:
    case TargetConfig::Source::Reference: {
      const SupershapeParams shape = t.reference_shape ? *t.reference_shape : s.shape;
      std::vector<double> k;
      if (t.reference_rate) {
        k.assign(s.mesh.num_elements(), *t.reference_rate);
      } else {
        k = rates_of(forward_batch(s.weights, s.mesh.element_centers()), c.library);
      }
      const std::vector<double> m = release_of(c, s.mesh, shape, k);
      return Eigen::Map<const Eigen::VectorXd>(m.data(), N);
    }
  }
  return {};
}

// Field snapshots of a fixed design every `stride` steps.
void export_fields(const RunConfig& c, const StructuredMesh& mesh, const SupershapeParams& shape,
                   const NetworkWeights& w, const fs::path& dir) {
  if (c.output.field_stride <= 0) return;
  fs::create_directories(dir);
  const Eigen::MatrixXd gamma_nodal = forward_batch(w, mesh.nodes);
  const std::vector<double> kn = rates_of(gamma_nodal, c.library);
  const Eigen::Map<const Eigen::VectorXd> k_nodal(kn.data(), static_cast<Eigen::Index>(kn.size()));
  const std::vector<double> k = rates_of(forward_batch(w, mesh.element_centers()), c.library);
  const CoupledAssembler A(mesh, c.constants, c.solver);
  const std::vector<double> phi = sample_phase_field(shape, mesh.nodes, A.phase_model().mu);
  const Eigen::Map<const Eigen::VectorXd> phi0(phi.data(), static_cast<Eigen::Index>(phi.size()));
  const int stride = c.output.field_stride;
  simulate(phi0, k, A, c.solver.n_steps, [&](const StateFields& st) {
    if (st.step % stride != 0) return;
    const std::string name = step_name(st.step);
    write_vtk_fields((dir / (name + ".vtk")).string(), mesh, st, k_nodal, gamma_nodal, c.library,
                     st.step * c.solver.dt);
    write_csv_fields((dir / (name + ".csv")).string(), mesh, st);
  });
}

json shape_json(const SupershapeParams& p) {
  return {{"cx", p.cx}, {"cy", p.cy}, {"theta", p.theta}, {"a", p.a},
          {"b", p.b},   {"n", p.n},   {"m", p.m},         {"m_rounded", std::lround(p.m)}};
}

void write_design_summary(const fs::path& path, const RunConfig& c, const Evaluation& ev,
                          const ShapeVector* latent, const std::string& weights_file,
                          const std::string& termination, int iterations) {
  json j;
  j["format_version"] = kFormatVersion;
  j["termination"] = termination;
  if (iterations >= 0) j["iterations"] = iterations;
  j["shape"] = shape_json(ev.shape);
  if (latent) j["shape_latent"] = *latent;
  j["weights_file"] = weights_file;
  json fr = json::object();
  for (std::size_t s = 0; s < c.library.size(); ++s) fr[c.library.names[s]] = ev.fractions.at(s);
  j["volume_fractions"] = fr;
  std::vector<double> lstar(c.library.size());
  for (std::size_t s = 0; s < lstar.size(); ++s) lstar[s] = c.optimizer.lambda_star_for(static_cast<int>(s));
  j["lambda_star"] = lstar;
  j["grayness"] = ev.grayness_measure;
  j["g_r"] = ev.g_r;
  j["g_v"] = ev.g_v;
  j["J"] = ev.J;
  j["J_norm"] = ev.J / ev.J0;
  open_out(path) << j.dump(2) << "\n";
}

struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;
  void set(const std::string& k, const std::string& v) { entries.emplace_back(k, v); }
  void write(const fs::path& path) const {
    std::ofstream out = open_out(path);
    for (const auto& [k, v] : entries) out << k << " = " << v << "\n";
  }
};

RunResult run_gradcheck(const RunConfig& c, DesignEvaluator& evaluator, const LatentDesign& d,
                        const fs::path& dir) {
  LossContext ctx;
  ctx.xi = c.optimizer.xi_init;
  ctx.tau = c.optimizer.tau0;
  const Evaluation ev = evaluator.evaluate(d, ctx, true);
  ctx.J0 = ev.J0;
  auto loss_at = [&](const LatentDesign& x) { return evaluator.evaluate(x, ctx, false).loss; };
  const double h0 = c.output.gradcheck_step;

  // Central differences, refined by 10x until two successive estimates agree.
  // ReLU kinks closer than h to the design point otherwise poison the oracle.
  const double settle = 0.1 * c.output.gradcheck_tol;
  // Components far below the largest adjoint entry settle on an absolute footing.
  const double noise =
      1e-3 * std::max(ev.grad_w.lpNorm<Eigen::Infinity>(),
                      Eigen::Map<const Eigen::VectorXd>(ev.grad_zeta.data(), kNumShapeParams).lpNorm<Eigen::Infinity>());
  struct Row {
    std::string name;
    double adjoint;
    double fd;
    double step;
  };
  auto probe = [&](const std::string& name, double adjoint, const std::function<LatentDesign(double)>& at) {
    auto central = [&](double h) { return (loss_at(at(h)) - loss_at(at(-h))) / (2.0 * h); };
    double h = h0;
    double fd = central(h);
    for (int r = 0; r < 3; ++r) {
      const double finer = central(h / 10.0);
      // On agreement keep the coarser one, it carries less roundoff.
      if (std::abs(finer - fd) <= settle * std::max({std::abs(finer), std::abs(fd), noise})) break;
      h /= 10.0;
      fd = finer;
    }
    return Row{name, adjoint, fd, h};
  };

  std::vector<Row> rows;
  for (int i = 0; i < kNumShapeParams; ++i) {
    rows.push_back(probe("zeta_latent." + kShapeParamNames[i], ev.grad_zeta[i], [&](double h) {
      LatentDesign x = d;
      x.zeta_latent[i] += h;
      return x;
    }));
  }
  const Eigen::VectorXd w0 = d.w.flatten();
  std::vector<Eigen::Index> picks(static_cast<std::size_t>(w0.size()));
  for (Eigen::Index i = 0; i < w0.size(); ++i) picks[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(c.network.seed + 1);
  std::shuffle(picks.begin(), picks.end(), rng);
  const int nw = std::min<int>(c.output.gradcheck_coords, static_cast<int>(picks.size()));
  for (int t = 0; t < nw; ++t) {
    const Eigen::Index i = picks[t];
    rows.push_back(probe("w[" + std::to_string(i) + "]", ev.grad_w[i], [&](double h) {
      LatentDesign x = d;
      Eigen::VectorXd w = w0;
      w[i] += h;
      x.w.unflatten(w);
      return x;
    }));
  }

  double scale = 0.0;
  for (const auto& r : rows) scale = std::max({scale, std::abs(r.adjoint), std::abs(r.fd)});
  // Components far below the largest one are compared on an absolute footing.
  const double floor = 1e-6 * scale;
  double worst = 0.0;
  std::ofstream out = open_out(dir / "gradcheck_report.txt");
  out << "format_version = " << kFormatVersion << "\n";
  out << "loss = " << fmt17(ev.loss) << "\n";
  out << "fd_step = " << fmt17(h0) << "\n";
  out << "coordinate,adjoint,finite_difference,relative_error,step\n";
  for (const auto& r : rows) {
    const double rel = std::abs(r.adjoint - r.fd) / std::max({std::abs(r.adjoint), std::abs(r.fd), floor});
    worst = std::max(worst, rel);
    out << r.name << "," << fmt17(r.adjoint) << "," << fmt17(r.fd) << "," << fmt17(rel) << ","
        << fmt17(r.step) << "\n";
  }
  out << "max_relative_error = " << fmt17(worst) << "\n";
  const bool ok = worst <= c.output.gradcheck_tol;
  out << "status = " << (ok ? "pass" : "fail") << "\n";
  spdlog::info("gradcheck: max relative error {:.3e} over {} coordinates ({})", worst, rows.size(),
               ok ? "pass" : "fail");
  return {ok ? 0 : 71, ok ? "gradcheck_pass" : "gradcheck_fail"};
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidGeometryError*>(&e)) return 64;
  if (dynamic_cast<const AdjointError*>(&e)) return 71;
  if (dynamic_cast<const DegenerateDesignError*>(&e)) return 72;
  if (dynamic_cast<const SolverError*>(&e)) return 70;
  return 70;
}

void write_vtk_fields(const std::string& path, const StructuredMesh& mesh, const StateFields& s,
                      const Eigen::VectorXd& k_nodal, const Eigen::MatrixXd& gamma_nodal,
                      const ExcipientLibrary& library, double time) {
  std::ofstream out = open_out(path);
  const int np = mesh.num_nodes();
  out << "# vtk DataFile Version 3.0\n";
  out << "pilltop format_version " << kFormatVersion << " step " << s.step << " t " << fmt17(time)
      << " materials";
  for (std::size_t m = 0; m < library.size(); ++m) {
    out << " " << library.names[m] << ":" << (m < library.colors.size() ? library.colors[m] : "");
  }
  out << "\nASCII\nDATASET STRUCTURED_GRID\n";
  out << "DIMENSIONS " << mesh.nx + 1 << " " << mesh.ny + 1 << " 1\n";
  out << "POINTS " << np << " double\n";
  for (const auto& p : mesh.nodes) out << fmt17(p.x()) << " " << fmt17(p.y()) << " 0\n";
  out << "POINT_DATA " << np << "\n";
  auto scalars = [&](const std::string& name, auto value) {
    out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
    for (int i = 0; i < np; ++i) out << fmt17(value(i)) << "\n";
  };
  scalars("phi", [&](int i) { return s.phi[i]; });
  scalars("C", [&](int i) { return s.C[i]; });
  scalars("k_field", [&](int i) { return k_nodal[i]; });
  for (std::size_t m = 0; m < library.size(); ++m) {
    scalars("gamma_" + library.names[m], [&](int i) { return gamma_nodal(static_cast<Eigen::Index>(m), i); });
  }
}

void write_csv_fields(const std::string& path, const StructuredMesh& mesh, const StateFields& s) {
  std::ofstream out = open_out(path);
  out << "# format_version " << kFormatVersion << "\n";
  out << "x,y,phi,C\n";
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    out << fmt17(mesh.nodes[i].x()) << "," << fmt17(mesh.nodes[i].y()) << "," << fmt17(s.phi[i])
        << "," << fmt17(s.C[i]) << "\n";
  }
}

void write_release_curve(const std::string& path, double dt, std::span<const double> mdot,
                         const Eigen::VectorXd& target) {
  std::ofstream out = open_out(path);
  out << "# format_version " << kFormatVersion << "\n";
  out << "t,mdot,mdot_target\n";
  for (std::size_t n = 0; n < mdot.size(); ++n) {
    out << fmt17((n + 1) * dt) << "," << fmt17(mdot[n]) << ",";
    if (static_cast<std::size_t>(target.size()) == mdot.size()) out << fmt17(target[n]);
    out << "\n";
  }
}

void write_iteration_log(const std::string& path, const std::vector<IterationRecord>& history) {
  std::ofstream out = open_out(path);
  out << "# format_version " << kFormatVersion << "\n";
  out << "iter,J,J_norm,g_r,g_v,loss,xi,tau,grad_norm_w,grad_norm_zeta\n";
  for (const auto& r : history) {
    out << r.iter << "," << fmt17(r.J) << "," << fmt17(r.J_norm) << "," << fmt17(r.g_r) << ","
        << fmt17(r.g_v) << "," << fmt17(r.loss) << "," << fmt17(r.xi) << "," << fmt17(r.tau) << ","
        << fmt17(r.grad_norm_w) << "," << fmt17(r.grad_norm_zeta) << "\n";
  }
}

RunResult run(const RunConfig& c, bool verbose) {
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  const fs::path dir(c.output.dir);
  Manifest manifest;
  manifest.set("format_version", std::to_string(kFormatVersion));
  manifest.set("tool", "pilltop");
  manifest.set("tool_version", kToolVersion);
  manifest.set("mode", to_string(c.mode));
  manifest.set("seed", std::to_string(c.network.seed));
  manifest.set("config", "resolved_config.json");
  manifest.set("started", timestamp());
  const auto t0 = std::chrono::steady_clock::now();

  RunResult result;
  try {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
    open_out(dir / "resolved_config.json") << dump_config(c);

    Setup s;
    s.mesh = build_mesh(c.mesh.nx, c.mesh.ny, c.mesh.Lx, c.mesh.Ly);
    const std::vector<Point> centers = s.mesh.element_centers();
    s.weights = make_network(c, centers, s.pretrain);
    spdlog::info("network: {} materials, {} trainable weights, pretrain {} iterations (max deviation {:.2e}{})",
                 s.weights.num_materials(), s.weights.num_trainable(), s.pretrain.iterations,
                 s.pretrain.max_deviation, s.pretrain.converged ? "" : ", cap reached");
    s.shape = c.initial_shape ? *c.initial_shape : SupershapeParams::from_array(c.bounds.midpoint());
    const Eigen::VectorXd target = resolve_target(c, s);

    if (c.mode == RunMode::Simulate) {
      const std::vector<double> k = rates_of(forward_batch(s.weights, centers), c.library);
      const std::vector<double> mdot = release_of(c, s.mesh, s.shape, k);
      write_release_curve((dir / "release_curve.csv").string(), c.solver.dt, mdot, target);
      export_fields(c, s.mesh, s.shape, s.weights, dir / "fields");
      save_weights(s.weights, (dir / "design_weights.txt").string());
      result = {0, "completed"};
    } else {
      DesignProblem problem;
      problem.mesh = s.mesh;
      problem.constants = c.constants;
      problem.solver = c.solver;
      problem.library = c.library;
      problem.bounds = c.bounds;
      problem.opt = c.optimizer;
      problem.target = target.size() ? target : Eigen::VectorXd::Zero(c.solver.n_steps);
      DesignEvaluator evaluator(problem);
      LatentDesign design;
      design.w = s.weights;
      design.zeta_latent = to_latent(s.shape, c.bounds);

      if (c.mode == RunMode::Gradcheck) {
        result = run_gradcheck(c, evaluator, design, dir);
      } else {
        std::vector<IterationRecord> history;
        std::ofstream timing = open_out(dir / "timing.csv");
        timing << "# format_version " << kFormatVersion << "\niter,seconds\n";
        const std::string log_path = (dir / "iteration_log.csv").string();
        const OptimizationResult opt = run_optimization(
            evaluator, design, [&](const IterationRecord& r, const Evaluation& ev) {
              history.push_back(r);
              write_iteration_log(log_path, history);
              timing << r.iter << "," << fmt17(r.seconds) << "\n" << std::flush;
              spdlog::info("iter {:3d}  J/J0 {:.4e}  loss {:+.5f}  g_r {:+.4f}  g_v {:+.4f}  |gw| {:.2e}  |gz| {:.2e}  {:.1f}s",
                           r.iter, r.J_norm, r.loss, r.g_r, r.g_v, r.grad_norm_w,
                           r.grad_norm_zeta, r.seconds);
              if (verbose || c.output.dump_adjoint_norms) {
                std::ostringstream os;
                for (double v : ev.step_grad_norms) os << " " << v;
                spdlog::debug("iter {} adjoint norms per step:{}", r.iter, os.str());
              }
            });
        const bool converged = opt.termination == Termination::Converged;
        result = {converged ? 0 : 2, converged ? "converged" : "iteration_cap"};
        const Evaluation& ev = opt.final_eval;
        write_release_curve((dir / "release_curve.csv").string(), c.solver.dt, ev.mdot, target);
        save_weights(opt.design.w, (dir / "design_weights.txt").string());
        write_design_summary(dir / "design_summary.json", c, ev, &opt.design.zeta_latent,
                             "design_weights.txt", result.termination,
                             static_cast<int>(opt.history.size()));
        export_fields(c, s.mesh, ev.shape, opt.design.w, dir / "fields");
      }
    }
  } catch (const std::exception& e) {
    result.exit_code = exit_code_for(e);
    result.termination = "error";
    std::string what = e.what();
    if (const auto* ne = dynamic_cast<const NonconvergenceError*>(&e)) {
      what += " (step " + std::to_string(ne->step()) + ")";
    } else if (const auto* ae = dynamic_cast<const AdjointError*>(&e)) {
      what += " (step " + std::to_string(ae->step()) + ")";
    }
    spdlog::error("{}", what);
    std::replace(what.begin(), what.end(), '\n', ';');
    manifest.set("error", what);
  }
  manifest.set("termination", result.termination);
  manifest.set("exit_code", std::to_string(result.exit_code));
  manifest.set("finished", timestamp());
  manifest.set("wall_seconds",
               fmt17(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  try {
    manifest.write(dir / "manifest.txt");
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    if (result.exit_code == 0) result.exit_code = 64;
  }
  return result;
}

}  // namespace pilltop

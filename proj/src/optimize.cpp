#include "pilltop/optimize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "pilltop/errors.hpp"

namespace pilltop {

namespace {

constexpr double kDefaultLambdaStar = 5e-2;

Eigen::Map<const Eigen::VectorXd> volumes_of(const StructuredMesh& mesh) {
  return {mesh.volumes.data(), mesh.num_elements()};
}

double solid_volume(const Eigen::VectorXd& phi_centers, const StructuredMesh& mesh) {
  const double V = phi_centers.dot(volumes_of(mesh));
  const double eps_v = 1e-9 * mesh.Lx * mesh.Ly;
  if (!(V > eps_v)) {
    std::ostringstream msg;
    msg << "solid volume " << V << " vanished (pill no longer inside the domain)";
    throw DegenerateDesignError(msg.str());
  }
  return V;
}

}  // namespace

void OptConfig::validate(int num_materials) const {
  std::vector<std::string> errs;
  auto positive = [&](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) errs.push_back(std::string("optimizer.") + name + " must be positive");
  };
  positive(lr, "lr");
  positive(grad_clip_norm, "grad_clip_norm");
  positive(loss_tol, "loss_tol");
  positive(xi_init, "xi_init");
  positive(xi_step, "xi_step");
  positive(xi_final, "xi_final");
  positive(alpha, "alpha");
  positive(tau0, "tau0");
  positive(nu, "nu");
  if (max_iters < 1) errs.push_back("optimizer.max_iters must be >= 1");
  if (xi_final > xi_init) errs.push_back("optimizer.xi_final must not exceed optimizer.xi_init");
  if (!lambda_star.empty() && static_cast<int>(lambda_star.size()) != num_materials) {
    errs.push_back("optimizer.lambda_star has " + std::to_string(lambda_star.size()) +
                   " entries but the library has " + std::to_string(num_materials) +
                   " materials");
  }
  for (double l : lambda_star) {
    if (!(l > 0.0) || l >= 1.0) errs.push_back("optimizer.lambda_star entries must lie in (0, 1)");
  }
  if (!errs.empty()) {
    std::string all;
    for (const auto& e : errs) all += (all.empty() ? "" : "; ") + e;
    throw ConfigError(all);
  }
}

double OptConfig::lambda_star_for(int s) const {
  return lambda_star.empty() ? kDefaultLambdaStar : lambda_star.at(s);
}

double OptConfig::xi_at(int iteration) const {
  return std::max(xi_final, xi_init - iteration * xi_step);
}

double OptConfig::tau_at(int iteration) const { return tau0 * std::pow(nu, iteration); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

SupershapeParams from_latent(const ShapeVector& zeta_latent, const BoundsBox& bounds) {
  ShapeVector z{};
  for (int i = 0; i < kNumShapeParams; ++i) {
    z[i] = bounds.lower[i] + (bounds.upper[i] - bounds.lower[i]) * sigmoid(zeta_latent[i]);
  }
  return SupershapeParams::from_array(z);
}

ShapeVector from_latent_vjp(const ShapeVector& zeta_latent, const BoundsBox& bounds,
                            const ShapeVector& d_zeta) {
  ShapeVector out{};
  for (int i = 0; i < kNumShapeParams; ++i) {
    const double s = sigmoid(zeta_latent[i]);
    out[i] = d_zeta[i] * (bounds.upper[i] - bounds.lower[i]) * s * (1.0 - s);
  }
  return out;
}

ShapeVector to_latent(const SupershapeParams& zeta, const BoundsBox& bounds) {
  const ShapeVector z = zeta.to_array();
  ShapeVector out{};
  for (int i = 0; i < kNumShapeParams; ++i) {
    const double u = (z[i] - bounds.lower[i]) / (bounds.upper[i] - bounds.lower[i]);
    if (!(u > 0.0 && u < 1.0)) {
      throw ConfigError("initial " + kShapeParamNames[i] + " lies outside its bounds");
    }
    out[i] = std::log(u / (1.0 - u));
  }
  return out;
}

std::vector<double> mass_rate(const std::vector<Eigen::VectorXd>& phi_centers,
                              const StructuredMesh& mesh, double rho_s, double dt) {
  const auto vol = volumes_of(mesh);
  std::vector<double> out;
  for (std::size_t n = 1; n < phi_centers.size(); ++n) {
    out.push_back(rho_s / dt * (phi_centers[n] - phi_centers[n - 1]).dot(vol));
  }
  return out;
}

double objective_mse(std::span<const double> mdot, std::span<const double> target) {
  if (mdot.size() != target.size() || mdot.empty()) {
    throw ConfigError("target profile has " + std::to_string(target.size()) +
                      " samples but the run produces " + std::to_string(mdot.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < mdot.size(); ++i) s += (mdot[i] - target[i]) * (mdot[i] - target[i]);
  return s / static_cast<double>(mdot.size());
}

double grayness(const Eigen::MatrixXd& gamma) {
  if (gamma.size() == 0) return 0.0;
  return (gamma.array() * (1.0 - gamma.array())).sum() / static_cast<double>(gamma.size());
}

double grayness_masked(const Eigen::MatrixXd& gamma, const Eigen::VectorXd& phi_centers) {
  const Eigen::RowVectorXd per = (gamma.array() * (1.0 - gamma.array())).colwise().sum();
  const double w = phi_centers.sum();
  if (!(w > 0.0)) return 0.0;
  return per.dot(phi_centers) / (gamma.rows() * w);
}

std::vector<double> volume_fractions(const Eigen::MatrixXd& gamma,
                                     const Eigen::VectorXd& phi_centers,
                                     const StructuredMesh& mesh) {
  const double V = solid_volume(phi_centers, mesh);
  const Eigen::VectorXd pv = phi_centers.cwiseProduct(volumes_of(mesh));
  const Eigen::VectorXd f = gamma * pv / V;
  return {f.data(), f.data() + f.size()};
}

std::vector<double> volume_deficit(const Eigen::MatrixXd& gamma,
                                   const Eigen::VectorXd& phi_centers, const StructuredMesh& mesh,
                                   std::span<const double> lambda_star) {
  if (static_cast<Eigen::Index>(lambda_star.size()) != gamma.rows()) {
    throw ConfigError("lambda_star length does not match the number of materials");
  }
  std::vector<double> f = volume_fractions(gamma, phi_centers, mesh);
  for (std::size_t s = 0; s < f.size(); ++s) f[s] = f[s] / lambda_star[s] - 1.0;
  return f;
}

double volume_constraint(std::span<const double> lambdas, double alpha) {
  const double lo = *std::min_element(lambdas.begin(), lambdas.end());
  double s = 0.0;
  for (double l : lambdas) s += std::exp(-alpha * (l - lo));
  return -lo + std::log(s) / alpha;
}

double log_barrier(double g, double tau) {
  if (g <= -1.0 / (tau * tau)) return -std::log(-g) / tau;
  return tau * g - std::log(1.0 / (tau * tau)) / tau + 1.0 / tau;
}

double log_barrier_derivative(double g, double tau) {
  if (g <= -1.0 / (tau * tau)) return -1.0 / (tau * g);
  return tau;
}

double total_loss(double J, double J0, double g_r, double g_v, double tau) {
  return J / J0 + log_barrier(g_r, tau) + log_barrier(g_v, tau);
}

double clip_global_norm(std::vector<Eigen::VectorXd*> blocks, double max_norm) {
  double sq = 0.0;
  for (const auto* b : blocks) sq += b->squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (auto* b : blocks) *b *= max_norm / norm;
  }
  return norm;
}

DesignEvaluator::DesignEvaluator(DesignProblem problem) : problem_(std::move(problem)) {
  problem_.constants.validate();
  problem_.solver.validate();
  problem_.library.validate();
  problem_.bounds.validate();
  problem_.opt.validate(static_cast<int>(problem_.library.size()));
  assembler_ = std::make_unique<CoupledAssembler>(problem_.mesh, problem_.constants, problem_.solver);
  solver_ = std::make_unique<StepSolver>(*assembler_);
  centers_ = problem_.mesh.element_centers();
}

DesignEvaluator::~DesignEvaluator() = default;

Evaluation DesignEvaluator::realize(const LatentDesign& design) const {
  const StructuredMesh& mesh = problem_.mesh;
  const int S = static_cast<int>(problem_.library.size());
  if (design.w.num_materials() != S) {
    throw ConfigError("network output size does not match the excipient library");
  }
  Evaluation ev;
  ev.shape = from_latent(design.zeta_latent, problem_.bounds);
  const std::vector<double> phi =
      sample_phase_field(ev.shape, mesh.nodes, assembler_->phase_model().mu);
  ev.phi0 = Eigen::Map<const Eigen::VectorXd>(phi.data(), static_cast<Eigen::Index>(phi.size()));
  ev.phi0_centers = mesh.element_average(ev.phi0);
  ev.gamma = forward_batch(design.w, centers_);
  const Eigen::Map<const Eigen::VectorXd> rates(problem_.library.rates.data(), S);
  const Eigen::VectorXd k = ev.gamma.transpose() * rates;
  ev.k_field.assign(k.data(), k.data() + k.size());

  std::vector<double> lstar(S);
  for (int s = 0; s < S; ++s) lstar[s] = problem_.opt.lambda_star_for(s);
  ev.fractions = volume_fractions(ev.gamma, ev.phi0_centers, mesh);
  ev.lambdas = volume_deficit(ev.gamma, ev.phi0_centers, mesh, lstar);
  ev.g_v = volume_constraint(ev.lambdas, problem_.opt.alpha);
  ev.grayness_measure = problem_.opt.mask_grayness ? grayness_masked(ev.gamma, ev.phi0_centers)
                                                   : grayness(ev.gamma);
  return ev;
}

Evaluation DesignEvaluator::evaluate(const LatentDesign& design, const LossContext& ctx,
                                     bool with_gradient) {
  const StructuredMesh& mesh = problem_.mesh;
  const int S = static_cast<int>(problem_.library.size());
  const int ne = mesh.num_elements();
  const double rho = problem_.constants.rho_s;
  const double dt = problem_.solver.dt;
  const int N = problem_.solver.n_steps;
  const OptConfig& opt = problem_.opt;

  Evaluation ev = realize(design);
  const CheckpointSchedule sched = CheckpointSchedule::make(N, opt.checkpoint_spacing);
  const ForwardTrace trace = forward_pass(ev.phi0, ev.k_field, *assembler_, *solver_, sched);
  ev.newton_iterations = trace.newton_iterations;
  ev.mass = trace.mass;
  ev.mdot = mass_rate(trace.phi_centers, mesh, rho, dt);
  const std::span<const double> target(problem_.target.data(), problem_.target.size());
  ev.J = objective_mse(ev.mdot, target);
  ev.J0 = std::isnan(ctx.J0) ? (ev.J > 0.0 ? ev.J : 1.0) : ctx.J0;
  ev.g_r = ev.grayness_measure - ctx.xi;
  ev.loss = total_loss(ev.J, ev.J0, ev.g_r, ev.g_v, ctx.tau);
  if (!with_gradient) return ev;

  // d L / d mdot_n, then onto element-center phi of each step.
  std::vector<double> a(N + 2, 0.0);
  for (int n = 1; n <= N; ++n) a[n] = 2.0 * (ev.mdot[n - 1] - problem_.target[n - 1]) / (N * ev.J0);
  const auto vol = volumes_of(mesh);
  const int nn = mesh.num_nodes();
  auto cotangent = [&](int step, const StateFields&, Eigen::VectorXd& du) {
    const double c = rho / dt * (a[step] - a[step + 1]);
    if (c == 0.0) return;
    du.head(nn) += mesh.element_average_transpose(c * vol);
  };
  const AdjointResult adj = backward_sweep(trace, ev.k_field, *assembler_, *solver_, cotangent);
  ev.memory = adj.memory;
  ev.step_grad_norms = adj.step_grad_norms;

  // Cotangents of gamma (S x n_e) and of the design phi at element centers.
  const Eigen::Map<const Eigen::VectorXd> rates(problem_.library.rates.data(), S);
  Eigen::MatrixXd d_gamma = rates * adj.d_k.transpose();
  Eigen::VectorXd d_phic = Eigen::VectorXd::Zero(ne);

  const double dpsi_r = log_barrier_derivative(ev.g_r, ctx.tau);
  if (opt.mask_grayness) {
    const Eigen::RowVectorXd per = (ev.gamma.array() * (1.0 - ev.gamma.array())).colwise().sum();
    const double wsum = ev.phi0_centers.sum();
    if (wsum > 0.0) {
      const double G = ev.grayness_measure;
      for (int e = 0; e < ne; ++e) {
        d_gamma.col(e) += dpsi_r * ev.phi0_centers[e] / (S * wsum) *
                          (1.0 - 2.0 * ev.gamma.col(e).array()).matrix();
        d_phic[e] += dpsi_r * (per[e] / (S * wsum) - G / wsum);
      }
    }
  } else {
    d_gamma += (dpsi_r / static_cast<double>(S * ne)) * (1.0 - 2.0 * ev.gamma.array()).matrix();
  }

  const double dpsi_v = log_barrier_derivative(ev.g_v, ctx.tau);
  const double lo = *std::min_element(ev.lambdas.begin(), ev.lambdas.end());
  std::vector<double> wsm(S);
  double z = 0.0;
  for (int s = 0; s < S; ++s) z += (wsm[s] = std::exp(-opt.alpha * (ev.lambdas[s] - lo)));
  const double V = ev.phi0_centers.dot(vol);
  for (int s = 0; s < S; ++s) {
    const double dl = -dpsi_v * wsm[s] / z;  // d L / d lambda_s
    const double ls = opt.lambda_star_for(s);
    for (int e = 0; e < ne; ++e) {
      d_gamma(s, e) += dl * ev.phi0_centers[e] * vol[e] / (ls * V);
      d_phic[e] += dl * (ev.gamma(s, e) * vol[e] / (ls * V) - (ev.lambdas[s] + 1.0) * vol[e] / V);
    }
  }

  ev.grad_w = forward_vjp(design.w, centers_, d_gamma);
  const Eigen::VectorXd d_phi0 = adj.d_phi0 + mesh.element_average_transpose(d_phic);
  const ShapeVector d_zeta = sample_phase_field_vjp(
      ev.shape, mesh.nodes, assembler_->phase_model().mu,
      std::span<const double>(d_phi0.data(), d_phi0.size()));
  ev.grad_zeta = from_latent_vjp(design.zeta_latent, problem_.bounds, d_zeta);
  ev.has_gradient = true;
  return ev;
}

OptimizationResult run_optimization(DesignEvaluator& evaluator, LatentDesign initial,
                                    const IterationCallback& callback) {
  const OptConfig& opt = evaluator.problem().opt;
  AdamSettings adam;
  adam.lr = opt.lr;
  AdamMoments mw;
  AdamMoments mz;
  Eigen::VectorXd w = initial.w.flatten();
  Eigen::VectorXd zl = Eigen::Map<const Eigen::VectorXd>(initial.zeta_latent.data(), kNumShapeParams);
  mw.reset(w.size());
  mz.reset(zl.size());

  OptimizationResult result;
  LatentDesign design = std::move(initial);
  double J0 = std::numeric_limits<double>::quiet_NaN();
  const auto t_start = std::chrono::steady_clock::now();

  for (int j = 0; j < opt.max_iters; ++j) {
    LossContext ctx;
    ctx.J0 = J0;
    ctx.xi = opt.xi_at(j);
    ctx.tau = opt.tau_at(j);
    Evaluation ev = evaluator.evaluate(design, ctx, true);
    if (j == 0) J0 = ev.J0;

    Eigen::VectorXd gw = ev.grad_w;
    Eigen::VectorXd gz = Eigen::Map<const Eigen::VectorXd>(ev.grad_zeta.data(), kNumShapeParams);
    IterationRecord rec;
    rec.iter = j;
    rec.J = ev.J;
    rec.J_norm = ev.J / ev.J0;
    rec.g_r = ev.g_r;
    rec.g_v = ev.g_v;
    rec.loss = ev.loss;
    rec.xi = ctx.xi;
    rec.tau = ctx.tau;
    rec.grad_norm_w = gw.norm();
    rec.grad_norm_zeta = gz.norm();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    // The previous loss is re-scored with this iteration's xi and tau so the
    // continuation itself does not register as a change.
    bool done = false;
    if (j > 0) {
      const Evaluation& pe = result.final_eval;
      const double prev = total_loss(pe.J, ev.J0, pe.grayness_measure - ctx.xi, pe.g_v, ctx.tau);
      // Stopping while the grayness slack is still loose would skip the
      // rest of the continuation.
      done = std::abs(ev.loss - prev) <= opt.loss_tol && ev.grayness_measure <= opt.xi_final;
    }
    result.history.push_back(rec);
    if (callback) callback(rec, ev);

    result.design = design;
    result.final_eval = std::move(ev);
    if (done) {
      result.termination = Termination::Converged;
      return result;
    }
    if (!std::isfinite(gw.squaredNorm() + gz.squaredNorm())) {
      throw AdjointError("non-finite design gradient", j);
    }
    clip_global_norm({&gw, &gz}, opt.grad_clip_norm);
    adam_step(w, gw, mw, adam);
    adam_step(zl, gz, mz, adam);
    design.w.unflatten(w);
    for (int i = 0; i < kNumShapeParams; ++i) design.zeta_latent[i] = zl[i];
  }
  result.termination = Termination::IterationCap;
  return result;
}

}  // namespace pilltop

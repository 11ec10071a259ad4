#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pilltop/adam.hpp"
#include "pilltop/autodiff.hpp"
#include "pilltop/fem.hpp"
#include "pilltop/geometry.hpp"
#include "pilltop/materials.hpp"
#include "pilltop/matfield.hpp"

namespace pilltop {

struct OptConfig {
  double lr = 8e-3;
  double grad_clip_norm = 1.0;
  int max_iters = 100;
  double loss_tol = 1e-3;
  double xi_init = 2.0;
  double xi_step = 5e-2;
  double xi_final = 5e-2;
  std::vector<double> lambda_star;  // per material; empty -> 5e-2 each
  double alpha = 10.0;
  double tau0 = 3.0;
  double nu = 1.04;
  bool mask_grayness = false;  // weight the grayness sum by phi
  int checkpoint_spacing = 0;  // 0 -> ceil(sqrt(n_steps))

  void validate(int num_materials) const;
  double lambda_star_for(int s) const;
  double xi_at(int iteration) const;
  double tau_at(int iteration) const;
};

struct LatentDesign {
  NetworkWeights w;
  ShapeVector zeta_latent{};
};

double sigmoid(double x);

/// zeta_i = lo_i + (hi_i - lo_i) sigmoid(zeta_latent_i).
SupershapeParams from_latent(const ShapeVector& zeta_latent, const BoundsBox& bounds);
/// Chain rule through from_latent: d/d zeta_latent given d/d zeta.
ShapeVector from_latent_vjp(const ShapeVector& zeta_latent, const BoundsBox& bounds,
                            const ShapeVector& d_zeta);
/// Inverse map; `zeta` must lie strictly inside the bounds.
ShapeVector to_latent(const SupershapeParams& zeta, const BoundsBox& bounds);

/// mdot_n = (rho_s / dt) sum_e (phi_n(x_e) - phi_{n-1}(x_e)) v_e for n = 1..N.
std::vector<double> mass_rate(const std::vector<Eigen::VectorXd>& phi_centers,
                              const StructuredMesh& mesh, double rho_s, double dt);

/// (1/N) sum (mdot_n - target_n)^2.
double objective_mse(std::span<const double> mdot, std::span<const double> target);

/// (1/(S n_e)) sum_e sum_s gamma_s (1 - gamma_s); gamma is S x n_e.
double grayness(const Eigen::MatrixXd& gamma);
/// Same sum weighted by phi_e and normalized by S sum_e phi_e.
double grayness_masked(const Eigen::MatrixXd& gamma, const Eigen::VectorXd& phi_centers);

/// lambda_s = sum_e gamma_s phi_e v_e / (lambda*_s V_solid) - 1.
/// Throws DegenerateDesignError when V_solid <= eps_v.
std::vector<double> volume_deficit(const Eigen::MatrixXd& gamma,
                                   const Eigen::VectorXd& phi_centers, const StructuredMesh& mesh,
                                   std::span<const double> lambda_star);

/// sum_e gamma_s phi_e v_e / V_solid.
std::vector<double> volume_fractions(const Eigen::MatrixXd& gamma,
                                     const Eigen::VectorXd& phi_centers,
                                     const StructuredMesh& mesh);

/// Smooth minimum (1/alpha) log sum_s exp(-alpha lambda_s), max-shifted.
double volume_constraint(std::span<const double> lambdas, double alpha);

double log_barrier(double g, double tau);
double log_barrier_derivative(double g, double tau);

double total_loss(double J, double J0, double g_r, double g_v, double tau);

/// Scales all blocks together so their joint norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Eigen::VectorXd*> blocks, double max_norm);

struct DesignProblem {
  StructuredMesh mesh;
  PhysicsConstants constants;
  SolverSettings solver;
  ExcipientLibrary library;
  BoundsBox bounds;
  OptConfig opt;
  Eigen::VectorXd target;  // mdot* on t_n = n dt, n = 1..N; may be empty when unused
};

struct LossContext {
  double J0 = std::numeric_limits<double>::quiet_NaN();  // NaN: use this evaluation's J
  double xi = 2.0;
  double tau = 3.0;
};

struct Evaluation {
  SupershapeParams shape;
  Eigen::VectorXd phi0;          // nodal
  Eigen::VectorXd phi0_centers;  // design field used by the constraints
  Eigen::MatrixXd gamma;         // S x n_e at element centers
  std::vector<double> k_field;
  std::vector<double> mass;
  std::vector<double> mdot;
  double J = 0.0;
  double J0 = 1.0;
  double grayness_measure = 0.0;
  double g_r = 0.0;
  double g_v = 0.0;
  double loss = 0.0;
  std::vector<double> lambdas;
  std::vector<double> fractions;
  int newton_iterations = 0;

  bool has_gradient = false;
  Eigen::VectorXd grad_w;
  ShapeVector grad_zeta{};
  AdjointMemory memory;
  std::vector<double> step_grad_norms;
};

/// Runs the whole design -> loss pipeline and its adjoint. Owns the
/// assembler and the step solver, so one instance is reused across
/// iterations.
class DesignEvaluator {
 public:
  explicit DesignEvaluator(DesignProblem problem);
  ~DesignEvaluator();
  DesignEvaluator(const DesignEvaluator&) = delete;
  DesignEvaluator& operator=(const DesignEvaluator&) = delete;

  const DesignProblem& problem() const { return problem_; }
  const CoupledAssembler& assembler() const { return *assembler_; }
  const std::vector<Point>& centers() const { return centers_; }

  /// Design fields only (no simulation).
  Evaluation realize(const LatentDesign& design) const;

  Evaluation evaluate(const LatentDesign& design, const LossContext& ctx, bool with_gradient);

 private:
  DesignProblem problem_;
  std::unique_ptr<CoupledAssembler> assembler_;
  std::unique_ptr<StepSolver> solver_;
  std::vector<Point> centers_;
};

struct IterationRecord {
  int iter = 0;
  double J = 0.0;
  double J_norm = 0.0;
  double g_r = 0.0;
  double g_v = 0.0;
  double loss = 0.0;
  double xi = 0.0;
  double tau = 0.0;
  double grad_norm_w = 0.0;
  double grad_norm_zeta = 0.0;
  double seconds = 0.0;
};

enum class Termination { Converged, IterationCap };

struct OptimizationResult {
  LatentDesign design;    // the last evaluated design
  Evaluation final_eval;  // its evaluation
  std::vector<IterationRecord> history;
  Termination termination = Termination::IterationCap;
};

using IterationCallback = std::function<void(const IterationRecord&, const Evaluation&)>;

/// Adam with log barriers and the xi/tau continuation. Stops when
/// |L_j - L_{j-1}| <= loss_tol, both scored with (xi_j, tau_j), and the
/// grayness measure is within xi_final; otherwise after max_iters evaluations.
OptimizationResult run_optimization(DesignEvaluator& evaluator, LatentDesign initial,
                                    const IterationCallback& callback = {});

}  // namespace pilltop

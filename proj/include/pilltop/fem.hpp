#pragma once

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "pilltop/geometry.hpp"
#include "pilltop/materials.hpp"

namespace pilltop {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Uniform grid of bilinear quadrilaterals. Nodes are numbered
/// lexicographically (x fastest); element corners run counterclockwise.
struct StructuredMesh {
  int nx = 0;
  int ny = 0;
  double Lx = 1.0;
  double Ly = 1.0;
  std::vector<Point> nodes;
  std::vector<std::array<int, 4>> elements;
  std::vector<double> volumes;
  std::vector<int> boundary_nodes;
  std::vector<char> on_boundary;  // per node

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int num_elements() const { return static_cast<int>(elements.size()); }
  double hx() const { return Lx / nx; }
  double hy() const { return Ly / ny; }
  int node_id(int i, int j) const { return j * (nx + 1) + i; }

  std::vector<Point> element_centers() const;
  /// Bilinear interpolant at each element center (mean of the four corners).
  Eigen::VectorXd element_average(const Eigen::VectorXd& nodal) const;
  /// Adjoint of element_average: scatters element cotangents to nodes.
  Eigen::VectorXd element_average_transpose(const Eigen::VectorXd& per_element) const;
};

StructuredMesh build_mesh(int nx, int ny, double Lx = 1.0, double Ly = 1.0);

struct StateFields {
  Eigen::VectorXd phi;
  Eigen::VectorXd C;
  int step = 0;
};

/// 2x2 Gauss rule on the reference square [-1, 1]^2.
struct QuadratureRule {
  std::array<Eigen::Vector2d, 4> points;
  std::array<double, 4> weights;

  static QuadratureRule gauss2x2();
};

/// How |grad phi| is evaluated in the dissolution exchange.
///  upwind:   monotone nodal Osher-Sethian gradient (front moves inward, phi
///            stays bounded);
///  galerkin: gradient of the bilinear interpolant at Gauss points.
enum class InterfaceGradient { Upwind, Galerkin };

struct SolverSettings {
  double dt = 500.0;
  int n_steps = 100;
  double newton_rtol = 1e-8;
  double newton_atol = 1e-12;
  int newton_max = 25;
  int max_halvings = 8;
  double grad_eps = 1e-8;  // |grad phi| ~ sqrt(g.g + grad_eps^2) - grad_eps
  /// Numerical interface width (length). The phase equation is evaluated with
  /// width max(eps_t, interface_width) and the well mobility rescaled so the
  /// curvature coefficient M_phi W eps_t^2 is unchanged. 0 keeps eps_t.
  double interface_width = 0.03;
  InterfaceGradient interface_gradient = InterfaceGradient::Upwind;

  void validate() const;
};

/// Coefficients actually used by the phase equation on a given mesh.
struct PhaseModel {
  double width = 0.0;           // effective interface width
  double well_mobility = 0.0;   // multiplies psi'(phi)
  double gradient_coeff = 0.0;  // multiplies the stiffness term
  double mu = 0.0;              // projection steepness of the initial field

  static PhaseModel resolve(const PhysicsConstants& c, const SolverSettings& s);
};

struct Residuals {
  Eigen::VectorXd phi;
  Eigen::VectorXd C;
};

/// Dissolution exchange at one quadrature point.
struct InterfaceExchange {
  double f_diss = 0.0;  // -(k / rho_s) (C_sat - C) |grad phi|
  double source = 0.0;  // k (C_sat - C) |grad phi|
};

InterfaceExchange interface_exchange(double k, double C, double grad_norm,
                                     const PhysicsConstants& c);

/// Assembles residuals and tangents of one backward Euler step. The sparsity
/// pattern and element basis are built once per mesh.
///
/// Unknown ordering is [phi; C]. Mass, the double-well term and the
/// dissolution exchange are row-sum lumped (nodal C in the C_sat - C factor);
/// diffusion and gradient terms use the consistent 2x2 Gauss rule. Boundary
/// rows of the C block are replaced by C = 0. With the upwind gradient the
/// nodal exchange is k_a (C_sat - C_a) |grad phi|_a where k_a = sum of
/// v_e k_e / 4 over the elements touching node a.
class CoupledAssembler {
 public:
  CoupledAssembler(const StructuredMesh& mesh, const PhysicsConstants& constants,
                   const SolverSettings& settings);

  const StructuredMesh& mesh() const { return *mesh_; }
  const PhysicsConstants& constants() const { return constants_; }
  const SolverSettings& settings() const { return settings_; }
  const PhaseModel& phase_model() const { return phase_; }
  int num_dofs() const { return 2 * mesh_->num_nodes(); }
  double lumped_mass(int node) const { return lumped_mass_[node]; }

  void residual(const Eigen::VectorXd& u_next, const Eigen::VectorXd& u_prev,
                std::span<const double> k_field, Eigen::VectorXd& out) const;

  /// Overwrites the values of `out` (pattern from pattern()).
  void jacobian(const Eigen::VectorXd& u_next, const Eigen::VectorXd& u_prev,
                std::span<const double> k_field, SparseMatrix& out) const;

  const SparseMatrix& pattern() const { return pattern_; }

  /// Residual scaled to phase/concentration increments (rows divided by
  /// lumped_mass / dt); used for convergence tests.
  double scaled_norm(const Eigen::VectorXd& residual) const;

  /// d R / d u_prev is diagonal: -lumped_mass/dt on interior rows.
  Eigen::VectorXd prev_state_vjp(const Eigen::VectorXd& lambda) const;

  /// lambda^T d R / d k_e for every element.
  Eigen::VectorXd rate_vjp(const Eigen::VectorXd& u_next, const Eigen::VectorXd& lambda) const;

  /// Dissolution parts of the assembled vectors: F_phi (the 1/rho_s term) and F_c.
  void exchange_vectors(const Eigen::VectorXd& u_next, std::span<const double> k_field,
                        Eigen::VectorXd& f_phi, Eigen::VectorXd& f_c) const;

  /// Exchange terms at every (element, quadrature point), evaluated with the
  /// interpolated concentration.
  std::vector<InterfaceExchange> quadrature_exchange(const Eigen::VectorXd& u_next,
                                                     std::span<const double> k_field) const;

  bool is_dirichlet_row(int dof) const;

 private:
  struct Basis {
    std::array<std::array<double, 4>, 4> N;            // [gauss][node]
    std::array<std::array<Eigen::Vector2d, 4>, 4> dN;  // physical gradients
    double weight = 0.0;                               // per Gauss point
    double node_mass = 0.0;                            // row-sum lumped
    std::array<std::array<double, 4>, 4> stiffness;    // int grad Na . grad Nb
  };

  struct NodalGradient {
    double norm = 0.0;
    std::array<int, 5> nodes{};  // self, -x, +x, -y, +y (-1 when absent)
    std::array<double, 5> d{};   // d norm / d phi at each of `nodes`
  };

  void build_pattern();
  NodalGradient upwind_gradient(int node, const Eigen::VectorXd& u) const;
  double nodal_rate(int node, std::span<const double> k_field) const;

  const StructuredMesh* mesh_;
  PhysicsConstants constants_;
  SolverSettings settings_;
  PhaseModel phase_;
  Basis basis_;
  std::vector<double> lumped_mass_;
  SparseMatrix pattern_;
  std::vector<std::array<int, 64>> element_slots_;  // value index per (row, col) of 8x8
  std::vector<int> dirichlet_diag_slots_;
  std::vector<int> dirichlet_rows_;
  std::vector<std::array<int, 4>> node_elements_;  // -1 padded
  // Value slots for the upwind exchange: rows phi_a and C_a against
  // phi at the 5 stencil nodes, then (phi_a, C_a) and (C_a, C_a).
  std::vector<std::array<int, 12>> node_slots_;
};

Residuals assemble_residuals(const StateFields& next, const StateFields& prev,
                             std::span<const double> k_field, const PhysicsConstants& constants,
                             const StructuredMesh& mesh, const SolverSettings& settings);

SparseMatrix assemble_jacobian(const StateFields& next, const StateFields& prev,
                               std::span<const double> k_field, const PhysicsConstants& constants,
                               const StructuredMesh& mesh, const SolverSettings& settings);

Eigen::VectorXd pack_state(const StateFields& s);
StateFields unpack_state(const Eigen::VectorXd& u, int num_nodes, int step);

struct StepReport {
  int newton_iterations = 0;
  double residual_norm = 0.0;
};

/// Newton-Raphson solve of one implicit step with step halving.
class StepSolver {
 public:
  explicit StepSolver(const CoupledAssembler& assembler);
  ~StepSolver();
  StepSolver(const StepSolver&) = delete;
  StepSolver& operator=(const StepSolver&) = delete;

  StateFields solve(const StateFields& prev, std::span<const double> k_field,
                    StepReport* report = nullptr);

  /// Solves J(u)^T x = rhs at a converged state.
  Eigen::VectorXd solve_transposed(const Eigen::VectorXd& u_next, const Eigen::VectorXd& u_prev,
                                   std::span<const double> k_field, const Eigen::VectorXd& rhs);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

StateFields solve_timestep(const StateFields& prev, std::span<const double> k_field,
                           const PhysicsConstants& constants, const StructuredMesh& mesh,
                           const SolverSettings& settings);

/// Solid mass rho_s sum_e phi(x_e) v_e.
double solid_mass(const StructuredMesh& mesh, const Eigen::VectorXd& phi, double rho_s);

struct SimulationResult {
  std::vector<StateFields> stored;  // states at the requested stride (always step 0 and N)
  std::vector<double> mass;         // m_0 .. m_N
  std::vector<Eigen::VectorXd> phi_centers;  // element-center phi per step
  int newton_iterations = 0;
};

using StepObserver = std::function<void(const StateFields&)>;

/// Runs n_steps backward Euler steps from (phi0, C = 0). States are retained
/// every `store_stride` steps (1 = full history).
SimulationResult simulate(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const CoupledAssembler& assembler, int store_stride = 1,
                          const StepObserver& observer = {});

SimulationResult simulate(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const PhysicsConstants& constants, const StructuredMesh& mesh,
                          const SolverSettings& settings);

}  // namespace pilltop

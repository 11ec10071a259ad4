#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <doctest.h>

#include "pilltop/errors.hpp"
#include "pilltop/fem.hpp"

using namespace pilltop;
using doctest::Approx;

namespace {

struct RandomState {
  Eigen::VectorXd next, prev;
  std::vector<double> k;
};

RandomState random_state(const StructuredMesh& mesh, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int nn = mesh.num_nodes();
  RandomState s;
  s.next.resize(2 * nn);
  s.prev.resize(2 * nn);
  for (int a = 0; a < nn; ++a) {
    s.prev[a] = u(rng);
    s.next[a] = std::clamp(s.prev[a] - 0.1 * u(rng), 0.0, 1.0);
    s.prev[nn + a] = mesh.on_boundary[a] ? 0.0 : 0.8 * u(rng);
    s.next[nn + a] = mesh.on_boundary[a] ? 0.0 : 0.8 * u(rng);
  }
  for (int e = 0; e < mesh.num_elements(); ++e) s.k.push_back(1e-4 + 4e-4 * u(rng));
  return s;
}

Eigen::VectorXd circle_phi(const StructuredMesh& mesh, const SolverSettings& settings, double r,
                           const PhysicsConstants& c = {}) {
  SupershapeParams p;
  p.a = p.b = r;
  p.n = 2.0;
  p.m = 4.0;
  const PhaseModel pm = PhaseModel::resolve(c, settings);
  const auto v = sample_phase_field(p, mesh.nodes, pm.mu);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

}  // namespace

TEST_CASE("mesh construction") {
  const StructuredMesh m = build_mesh(2, 2);
  CHECK(m.num_nodes() == 9);
  CHECK(m.num_elements() == 4);
  for (double v : m.volumes) CHECK(v == 0.25);
  CHECK(m.boundary_nodes.size() == 8);
  const StructuredMesh big = build_mesh(75, 75);
  CHECK(big.num_nodes() == 5776);
  CHECK(big.num_elements() == 5625);
  CHECK_THROWS_AS(build_mesh(1, 1), ConfigError);
  CHECK_THROWS_AS(build_mesh(4, 4, -1.0, 1.0), ConfigError);

  const Eigen::VectorXd nodal = Eigen::VectorXd::LinSpaced(m.num_nodes(), 0.0, 1.0);
  const Eigen::VectorXd ce = Eigen::VectorXd::LinSpaced(4, 1.0, 2.0);
  CHECK(m.element_average(nodal).dot(ce) == Approx(nodal.dot(m.element_average_transpose(ce))));
}

TEST_CASE("residuals of stationary states") {
  const StructuredMesh mesh = build_mesh(6, 6);
  const PhysicsConstants c;
  const SolverSettings st;
  const std::vector<double> k(mesh.num_elements(), 2e-4);
  const int nn = mesh.num_nodes();
  for (double phi : {0.0, 1.0, 0.5}) {
    StateFields s{Eigen::VectorXd::Constant(nn, phi), Eigen::VectorXd::Zero(nn), 0};
    const Residuals r = assemble_residuals(s, s, k, c, mesh, st);
    const double tol = phi == 0.5 ? 1e-10 : 1e-14;  // |grad phi| is regularized, not zero
    CHECK(r.phi.cwiseAbs().maxCoeff() <= tol);
    if (phi == 0.0) CHECK(r.C.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("jacobian matches finite differences on a 4x4 mesh") {
  const StructuredMesh mesh = build_mesh(4, 4);
  const PhysicsConstants c;
  for (auto mode : {InterfaceGradient::Upwind, InterfaceGradient::Galerkin}) {
    SolverSettings st;
    st.interface_gradient = mode;
    const CoupledAssembler as(mesh, c, st);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const RandomState s = random_state(mesh, seed);
      SparseMatrix J = as.pattern();
      as.jacobian(s.next, s.prev, s.k, J);
      const Eigen::MatrixXd Jd(J);
      Eigen::MatrixXd Jfd(Jd.rows(), Jd.cols());
      const double h = 1e-7;
      Eigen::VectorXd rp, rm;
      for (int j = 0; j < as.num_dofs(); ++j) {
        Eigen::VectorXd up = s.next, um = s.next;
        up[j] += h;
        um[j] -= h;
        as.residual(up, s.prev, s.k, rp);
        as.residual(um, s.prev, s.k, rm);
        Jfd.col(j) = (rp - rm) / (2 * h);
      }
      const double rel = (Jd - Jfd).norm() / Jd.norm();
      CHECK(rel <= 1e-5);
    }
  }
}

TEST_CASE("pure solvent concentration block is an SPD heat tangent") {
  const StructuredMesh mesh = build_mesh(5, 5);
  const PhysicsConstants c;
  const SolverSettings st;
  const CoupledAssembler as(mesh, c, st);
  const int nn = mesh.num_nodes();
  const Eigen::VectorXd u = Eigen::VectorXd::Zero(2 * nn);
  const std::vector<double> k(mesh.num_elements(), 2e-4);
  SparseMatrix J = as.pattern();
  as.jacobian(u, u, k, J);
  std::vector<int> interior;
  for (int a = 0; a < nn; ++a)
    if (!mesh.on_boundary[a]) interior.push_back(a);
  const Eigen::MatrixXd D(J);
  Eigen::MatrixXd Kc(interior.size(), interior.size());
  for (std::size_t i = 0; i < interior.size(); ++i)
    for (std::size_t j = 0; j < interior.size(); ++j)
      Kc(i, j) = D(nn + interior[i], nn + interior[j]);
  CHECK((Kc - Kc.transpose()).norm() <= 1e-14 * Kc.norm());
  CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Kc).eigenvalues().minCoeff() > 0.0);
  // M/dt + D K: stiffness rows sum to zero away from the boundary
  for (std::size_t i = 0; i < interior.size(); ++i) {
    const int a = interior[i];
    double row = 0.0;
    bool touches_boundary = false;
    for (int b = 0; b < nn; ++b) {
      row += D(nn + a, nn + b);
      if (mesh.on_boundary[b] && D(nn + a, nn + b) != 0.0) touches_boundary = true;
    }
    if (!touches_boundary) CHECK(row == Approx(as.lumped_mass(a) / st.dt).epsilon(1e-6));
  }
}

TEST_CASE("stencil bound on nonzeros per row") {
  const StructuredMesh mesh = build_mesh(8, 8);
  const CoupledAssembler as(mesh, PhysicsConstants{}, SolverSettings{});
  const SparseMatrix& P = as.pattern();
  Eigen::VectorXi per_row = Eigen::VectorXi::Zero(P.rows());
  for (int j = 0; j < P.outerSize(); ++j)
    for (SparseMatrix::InnerIterator it(P, j); it; ++it) per_row[it.row()]++;
  CHECK(per_row.maxCoeff() <= 18);
}

TEST_CASE("source and forcing are dual at every quadrature point") {
  const StructuredMesh mesh = build_mesh(6, 6);
  const PhysicsConstants c;
  const SolverSettings st;
  const CoupledAssembler as(mesh, c, st);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const RandomState s = random_state(mesh, seed);
    for (const InterfaceExchange& x : as.quadrature_exchange(s.next, s.k)) {
      const double scale = std::max(std::abs(x.source), 1e-300);
      CHECK(std::abs(x.source + c.rho_s * x.f_diss) <= 1e-14 * scale);
      CHECK(x.f_diss <= 0.0);
    }
    Eigen::VectorXd f_phi, f_c;
    as.exchange_vectors(s.next, s.k, f_phi, f_c);
    CHECK((f_c - c.rho_s * f_phi).cwiseAbs().maxCoeff() <= 1e-14 * f_c.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("thin interface model") {
  const PhysicsConstants c;
  SolverSettings st;
  const PhaseModel pm = PhaseModel::resolve(c, st);
  CHECK(pm.width == 0.03);
  CHECK(pm.gradient_coeff == Approx(c.M_phi * c.W * c.eps_t * c.eps_t));
  CHECK(pm.well_mobility == Approx(c.M_phi * std::pow(c.eps_t / 0.03, 2)));
  st.interface_width = 0.0;
  const PhaseModel lit = PhaseModel::resolve(c, st);
  CHECK(lit.width == c.eps_t);
  CHECK(lit.well_mobility == c.M_phi);
  CHECK(lit.mu == c.mu);
}

TEST_CASE("single step solves") {
  const StructuredMesh mesh = build_mesh(8, 8);
  const PhysicsConstants c;
  const SolverSettings st;
  const int nn = mesh.num_nodes();
  const std::vector<double> k(mesh.num_elements(), 2e-4);

  SUBCASE("zero state is an exact root") {
    const CoupledAssembler as(mesh, c, st);
    StepSolver solver(as);
    StepReport rep;
    StateFields zero{Eigen::VectorXd::Zero(nn), Eigen::VectorXd::Zero(nn), 0};
    const StateFields out = solver.solve(zero, k, &rep);
    CHECK(rep.newton_iterations <= 1);
    CHECK(out.phi.cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.C.cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.step == 1);
  }
  SUBCASE("homogeneous solid stays put") {
    StateFields solid{Eigen::VectorXd::Ones(nn), Eigen::VectorXd::Zero(nn), 0};
    const StateFields out = solve_timestep(solid, k, c, mesh, st);
    CHECK((out.phi.array() - 1.0).abs().maxCoeff() <= 1e-8);
    CHECK(out.C.cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("circular pill loses mass") {
    StateFields s{circle_phi(mesh, st, 0.3), Eigen::VectorXd::Zero(nn), 0};
    const StateFields out = solve_timestep(s, k, c, mesh, st);
    CHECK(solid_mass(mesh, out.phi, c.rho_s) < solid_mass(mesh, s.phi, c.rho_s));
  }
}

TEST_CASE("simulation properties") {
  const StructuredMesh mesh = build_mesh(16, 16);
  const PhysicsConstants c;
  SolverSettings st;
  st.n_steps = 30;
  const int nn = mesh.num_nodes();
  const std::vector<double> k(mesh.num_elements(), 2e-4);

  const SimulationResult empty = simulate(Eigen::VectorXd::Zero(nn), k, c, mesh, st);
  for (double m : empty.mass) CHECK(m == 0.0);

  const SimulationResult r = simulate(circle_phi(mesh, st, 0.3), k, c, mesh, st);
  REQUIRE(r.mass.size() == 31);
  REQUIRE(r.stored.size() == 31);
  for (std::size_t n = 1; n < r.mass.size(); ++n) CHECK(r.mass[n] <= r.mass[n - 1]);
  for (const StateFields& s : r.stored) {
    CHECK(s.phi.minCoeff() >= -0.05);
    CHECK(s.phi.maxCoeff() <= 1.05);
    CHECK(s.C.minCoeff() >= -1e-8);
    for (int a : mesh.boundary_nodes) CHECK(s.C[a] == 0.0);
  }
  (void)nn;
}

#include <cmath>
#include <random>

#include <doctest.h>

#include "pilltop/autodiff.hpp"
#include "pilltop/geometry.hpp"
#include "unrolled.hpp"

using namespace pilltop;
using doctest::Approx;

namespace {

Eigen::VectorXd circle_phi(const StructuredMesh& mesh, const CoupledAssembler& as, double r) {
  SupershapeParams p;
  p.a = p.b = r;
  p.n = 2.0;
  p.m = 4.0;
  const auto v = sample_phase_field(p, mesh.nodes, as.phase_model().mu);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(a.norm(), b.norm());
}

// Loss sum_n w_n m_n with m_n the element-center solid mass.
StateCotangent mass_cotangent(const StructuredMesh& mesh, const PhysicsConstants& c,
                              std::vector<double> weights) {
  return [&mesh, &c, weights](int step, const StateFields&, Eigen::VectorXd& du) {
    if (weights[step] == 0.0) return;
    Eigen::VectorXd v(mesh.num_elements());
    for (int e = 0; e < mesh.num_elements(); ++e) v[e] = c.rho_s * mesh.volumes[e] * weights[step];
    du.head(mesh.num_nodes()) += mesh.element_average_transpose(v);
  };
}

}  // namespace

TEST_CASE("checkpoint schedules") {
  const CheckpointSchedule a = CheckpointSchedule::make(100);
  CHECK(a.spacing == 10);
  CHECK(a.stored.front() == 0);
  CHECK(a.stored.back() == 100);
  CHECK(a.stored.size() == 11);
  const CheckpointSchedule b = CheckpointSchedule::make(20);
  CHECK(b.spacing == 5);
  const CheckpointSchedule c = CheckpointSchedule::make(10, 4);
  CHECK(c.stored == std::vector<int>{0, 4, 8, 10});
  const CheckpointSchedule d = CheckpointSchedule::make(7, 1);
  CHECK(d.stored.size() == 8);
}

TEST_CASE("finite difference oracle") {
  auto quad = [](const Eigen::VectorXd& p) { return p.squaredNorm(); };
  const Eigen::VectorXd g = finite_difference_oracle(quad, Eigen::Vector2d(1.0, 2.0), 1e-4);
  CHECK(std::abs(g[0] - 2.0) <= 1e-8);
  CHECK(std::abs(g[1] - 4.0) <= 1e-8);
  auto cst = [](const Eigen::VectorXd&) { return 3.0; };
  CHECK(finite_difference_oracle(cst, Eigen::Vector3d(1, 2, 3), 1e-3).norm() == 0.0);

  const StructuredMesh mesh = build_mesh(20, 20);
  const auto centers = mesh.element_centers();
  auto area = [&](const Eigen::VectorXd& a) {
    SupershapeParams p;
    p.a = a[0];
    p.b = 0.25;
    const auto v = sample_phase_field(p, centers, 0.03);
    double s = 0.0;
    for (int e = 0; e < mesh.num_elements(); ++e) s += v[e] * mesh.volumes[e];
    return s;
  };
  Eigen::VectorXd a0(1);
  a0 << 0.25;
  CHECK(finite_difference_oracle(area, a0, 1e-4)[0] > 0.0);
}

TEST_CASE("zero cotangent gives zero gradients") {
  const StructuredMesh mesh = build_mesh(4, 4);
  const CoupledAssembler as(mesh, PhysicsConstants{}, SolverSettings{});
  StepSolver solver(as);
  const std::vector<double> k(mesh.num_elements(), 2e-4);
  StateFields prev{circle_phi(mesh, as, 0.3), Eigen::VectorXd::Zero(mesh.num_nodes()), 0};
  const StateFields next = solver.solve(prev, k);
  const AdjointState a =
      vjp_timestep(solver, as, next, prev, k, Eigen::VectorXd::Zero(as.num_dofs()));
  CHECK(a.d_prev.norm() == 0.0);
  CHECK(a.d_k.norm() == 0.0);
}

TEST_CASE("vjp matches unrolled Newton differentiation on a 2x2 mesh") {
  const StructuredMesh mesh = build_mesh(2, 2);
  SolverSettings st;
  st.newton_rtol = 1e-14;
  st.newton_atol = 1e-15;
  const CoupledAssembler as(mesh, PhysicsConstants{}, st);
  StepSolver solver(as);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int nn = mesh.num_nodes();
  for (int trial = 0; trial < 3; ++trial) {
    StateFields prev{Eigen::VectorXd(nn), Eigen::VectorXd::Zero(nn), 0};
    for (int a = 0; a < nn; ++a) {
      prev.phi[a] = 0.2 + 0.7 * u(rng);
      prev.C[a] = mesh.on_boundary[a] ? 0.0 : 0.5 * u(rng);
    }
    std::vector<double> k;
    for (int e = 0; e < mesh.num_elements(); ++e) k.push_back(1e-4 + 4e-4 * u(rng));
    Eigen::VectorXd g(as.num_dofs());
    for (int i = 0; i < g.size(); ++i) g[i] = u(rng) - 0.5;

    const StateFields next = solver.solve(prev, k);
    const AdjointState a = vjp_timestep(solver, as, next, prev, k, g);
    const auto ref = testing::unrolled_step_gradient(as, pack_state(prev), k, g);
    CHECK(rel_err(a.d_prev, ref.d_prev) <= 1e-6);
    CHECK(rel_err(a.d_k, ref.d_k) <= 1e-6);
  }
}

TEST_CASE("mass gradient with respect to a uniform rate") {
  const StructuredMesh mesh = build_mesh(4, 4);
  const PhysicsConstants c;
  SolverSettings st;
  st.n_steps = 1;
  st.newton_rtol = 1e-13;
  const CoupledAssembler as(mesh, c, st);
  StepSolver solver(as);
  const Eigen::VectorXd phi0 = circle_phi(mesh, as, 0.3);
  const double k0 = 2e-4;
  auto m1 = [&](double kk) {
    const std::vector<double> k(mesh.num_elements(), kk);
    return forward_pass(phi0, k, as, solver, CheckpointSchedule::make(1)).mass[1];
  };
  const std::vector<double> k(mesh.num_elements(), k0);
  const ForwardTrace tr = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(1));
  const AdjointResult r = backward_sweep(tr, k, as, solver, mass_cotangent(mesh, c, {0.0, 1.0}));
  const double h = 1e-8 * k0;
  const double fd = (m1(k0 + h) - m1(k0 - h)) / (2 * h);
  CHECK(r.d_k.sum() == Approx(fd).epsilon(1e-4));
  CHECK(fd < 0.0);
}

TEST_CASE("reverse sweep properties") {
  const StructuredMesh mesh = build_mesh(8, 8);
  const PhysicsConstants c;
  SolverSettings st;
  st.n_steps = 20;
  const CoupledAssembler as(mesh, c, st);
  StepSolver solver(as);
  const Eigen::VectorXd phi0 = circle_phi(mesh, as, 0.3);
  std::vector<double> k(mesh.num_elements());
  for (int e = 0; e < mesh.num_elements(); ++e) k[e] = 1e-4 + 3e-4 * (e % 7) / 6.0;
  std::vector<double> w(21);
  for (int n = 0; n <= 20; ++n) w[n] = std::sin(0.3 * n);

  SUBCASE("checkpoint spacing does not change gradients") {
    const ForwardTrace t1 = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(20, 1));
    const AdjointResult a = backward_sweep(t1, k, as, solver, mass_cotangent(mesh, c, w));
    const ForwardTrace t10 = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(20, 10));
    const AdjointResult b = backward_sweep(t10, k, as, solver, mass_cotangent(mesh, c, w));
    CHECK(rel_err(a.d_k, b.d_k) <= 1e-12);
    CHECK(rel_err(a.d_phi0, b.d_phi0) <= 1e-12);
    CHECK(b.memory.recomputed_steps > 0);
    CHECK(b.memory.peak_states <= b.memory.checkpoints + 10);
    const ForwardTrace ts = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(20));
    const AdjointResult s = backward_sweep(ts, k, as, solver, mass_cotangent(mesh, c, w));
    CHECK(s.memory.peak_states <= s.memory.checkpoints + ts.schedule.spacing);
  }
  SUBCASE("repeated sweeps are bitwise identical") {
    const ForwardTrace t = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(20));
    const AdjointResult a = backward_sweep(t, k, as, solver, mass_cotangent(mesh, c, w));
    const AdjointResult b = backward_sweep(t, k, as, solver, mass_cotangent(mesh, c, w));
    CHECK(a.d_k == b.d_k);
    CHECK(a.d_phi0 == b.d_phi0);
  }
  SUBCASE("a loss on m_1 only produces no adjoint beyond step 1") {
    std::vector<double> only(21, 0.0);
    only[1] = 1.0;
    const ForwardTrace t = forward_pass(phi0, k, as, solver, CheckpointSchedule::make(20));
    const AdjointResult a = backward_sweep(t, k, as, solver, mass_cotangent(mesh, c, only));
    for (int n = 2; n <= 20; ++n) CHECK(a.step_grad_norms[n - 1] == 0.0);
    CHECK(a.step_grad_norms[0] > 0.0);
    CHECK(a.d_phi0.norm() > 0.0);
  }
}

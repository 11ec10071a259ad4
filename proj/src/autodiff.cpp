#include "pilltop/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pilltop/errors.hpp"

namespace pilltop {

CheckpointSchedule CheckpointSchedule::make(int n_steps, int spacing) {
  if (n_steps < 1) throw ConfigError("checkpoint schedule needs at least one step");
  if (spacing <= 0) spacing = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_steps))));
  CheckpointSchedule s;
  s.n_steps = n_steps;
  s.spacing = spacing;
  for (int n = 0; n < n_steps; n += spacing) s.stored.push_back(n);
  s.stored.push_back(n_steps);
  return s;
}

ForwardTrace forward_pass(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const CoupledAssembler& assembler, StepSolver& solver,
                          const CheckpointSchedule& schedule, const StepObserver& observer) {
  const StructuredMesh& mesh = assembler.mesh();
  if (schedule.n_steps != assembler.settings().n_steps) {
    throw ConfigError("checkpoint schedule does not match solver.n_steps");
  }
  if (phi0.size() != mesh.num_nodes()) throw ConfigError("phi0 length does not match the mesh");
  if (static_cast<int>(k_field.size()) != mesh.num_elements()) {
    throw ConfigError("k_field length does not match the element count");
  }
  const Eigen::Map<const Eigen::VectorXd> vol(mesh.volumes.data(), mesh.num_elements());
  const double rho = assembler.constants().rho_s;

  ForwardTrace t;
  t.schedule = schedule;
  StateFields state{phi0, Eigen::VectorXd::Zero(mesh.num_nodes()), 0};
  auto record = [&] {
    t.phi_centers.push_back(mesh.element_average(state.phi));
    t.mass.push_back(rho * t.phi_centers.back().dot(vol));
    if (observer) observer(state);
  };
  t.checkpoints.push_back(state);
  record();
  std::size_t next = 1;
  for (int n = 1; n <= schedule.n_steps; ++n) {
    StepReport rep;
    state = solver.solve(state, k_field, &rep);
    t.newton_iterations += rep.newton_iterations;
    if (next < schedule.stored.size() && schedule.stored[next] == n) {
      t.checkpoints.push_back(state);
      ++next;
    }
    record();
  }
  return t;
}

AdjointState vjp_timestep(StepSolver& solver, const CoupledAssembler& assembler,
                          const StateFields& next, const StateFields& prev,
                          std::span<const double> k_field, const Eigen::VectorXd& cotangent) {
  const int nn = assembler.mesh().num_nodes();
  const Eigen::VectorXd u_next = pack_state(next);
  const Eigen::VectorXd u_prev = pack_state(prev);
  AdjointState a;
  Eigen::VectorXd lambda;
  try {
    lambda = solver.solve_transposed(u_next, u_prev, k_field, cotangent);
  } catch (const SolverError& e) {
    throw AdjointError(std::string("adjoint solve failed: ") + e.what(), next.step);
  }
  if (!lambda.allFinite()) throw AdjointError("adjoint solution is not finite", next.step);
  a.lambda_phi = lambda.head(nn);
  a.lambda_C = lambda.tail(nn);
  a.d_prev = -assembler.prev_state_vjp(lambda);
  a.d_k = -assembler.rate_vjp(u_next, lambda);
  return a;
}

AdjointResult backward_sweep(const ForwardTrace& trace, std::span<const double> k_field,
                             const CoupledAssembler& assembler, StepSolver& solver,
                             const StateCotangent& cotangent) {
  const CheckpointSchedule& sched = trace.schedule;
  const int nn = assembler.mesh().num_nodes();
  const int ndof = assembler.num_dofs();
  AdjointResult out;
  out.d_k = Eigen::VectorXd::Zero(assembler.mesh().num_elements());
  out.step_grad_norms.assign(sched.n_steps, 0.0);
  out.memory.checkpoints = static_cast<int>(trace.checkpoints.size());
  out.memory.peak_states = out.memory.checkpoints;

  Eigen::VectorXd carry = Eigen::VectorXd::Zero(ndof);
  std::vector<StateFields> span;
  for (int seg = sched.num_segments() - 1; seg >= 0; --seg) {
    const int a = sched.stored[seg];
    const int b = sched.stored[seg + 1];
    span.clear();
    span.push_back(trace.checkpoints[seg]);
    for (int n = a + 1; n < b; ++n) {
      try {
        span.push_back(solver.solve(span.back(), k_field));
      } catch (const SolverError& e) {
        throw AdjointError(std::string("recomputation diverged: ") + e.what(), n);
      }
      ++out.memory.recomputed_steps;
    }
    span.push_back(trace.checkpoints[seg + 1]);
    out.memory.peak_states =
        std::max(out.memory.peak_states, out.memory.checkpoints + (b - a - 1));

    for (int n = b; n > a; --n) {
      Eigen::VectorXd g = carry;
      if (cotangent) cotangent(n, span[n - a], g);
      const AdjointState st = vjp_timestep(solver, assembler, span[n - a], span[n - a - 1],
                                           k_field, g);
      out.d_k += st.d_k;
      carry = st.d_prev;
      out.step_grad_norms[n - 1] =
          std::sqrt(st.lambda_phi.squaredNorm() + st.lambda_C.squaredNorm());
    }
  }
  if (cotangent) cotangent(0, trace.checkpoints.front(), carry);
  out.d_phi0 = carry.head(nn);
  return out;
}

Eigen::VectorXd finite_difference_oracle(const std::function<double(const Eigen::VectorXd&)>& f,
                                         const Eigen::VectorXd& params, double step) {
  Eigen::VectorXd g(params.size());
  Eigen::VectorXd p = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    p[i] = params[i] + step;
    const double fp = f(p);
    p[i] = params[i] - step;
    const double fm = f(p);
    p[i] = params[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace pilltop

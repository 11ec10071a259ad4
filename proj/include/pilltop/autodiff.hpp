#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "pilltop/fem.hpp"

namespace pilltop {

/// Which states the forward pass keeps. Step 0 and step N are always stored;
/// every other state is recomputed from the nearest earlier checkpoint.
struct CheckpointSchedule {
  int n_steps = 0;
  int spacing = 1;
  std::vector<int> stored;  // ascending, front() == 0, back() == n_steps

  /// spacing <= 0 selects ceil(sqrt(n_steps)).
  static CheckpointSchedule make(int n_steps, int spacing = 0);
  int num_segments() const { return static_cast<int>(stored.size()) - 1; }
};

struct ForwardTrace {
  CheckpointSchedule schedule;
  std::vector<StateFields> checkpoints;      // one per schedule.stored
  std::vector<Eigen::VectorXd> phi_centers;  // steps 0..N
  std::vector<double> mass;                  // steps 0..N
  int newton_iterations = 0;
};

/// Forward run keeping only the scheduled states. `solver` must be reused by
/// backward_sweep so recomputed states reproduce the forward ones exactly.
ForwardTrace forward_pass(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const CoupledAssembler& assembler, StepSolver& solver,
                          const CheckpointSchedule& schedule, const StepObserver& observer = {});

/// Adjoint of one step and the gradients it produces.
struct AdjointState {
  Eigen::VectorXd lambda_phi;
  Eigen::VectorXd lambda_C;
  Eigen::VectorXd d_prev;  // d loss / d u_prev, packed [phi; C]
  Eigen::VectorXd d_k;     // d loss / d k_e
};

/// Solves J^T lambda = cotangent at the converged step and returns
/// -lambda^T dR/du_prev and -lambda^T dR/dk. Throws AdjointError.
AdjointState vjp_timestep(StepSolver& solver, const CoupledAssembler& assembler,
                          const StateFields& next, const StateFields& prev,
                          std::span<const double> k_field, const Eigen::VectorXd& cotangent);

/// Adds d loss / d u_step (packed [phi; C]) into `du` for a state visited by
/// the reverse sweep. Called once per step, N down to 0.
using StateCotangent = std::function<void(int step, const StateFields&, Eigen::VectorXd& du)>;

struct AdjointMemory {
  int checkpoints = 0;
  int peak_states = 0;  // checkpoints plus recomputed states alive at once
  int recomputed_steps = 0;
};

struct AdjointResult {
  Eigen::VectorXd d_phi0;  // nodal
  Eigen::VectorXd d_k;     // per element
  AdjointMemory memory;
  std::vector<double> step_grad_norms;  // |lambda| per step, index n-1
};

AdjointResult backward_sweep(const ForwardTrace& trace, std::span<const double> k_field,
                             const CoupledAssembler& assembler, StepSolver& solver,
                             const StateCotangent& cotangent);

/// Central differences, one coordinate at a time. Test oracle only.
Eigen::VectorXd finite_difference_oracle(const std::function<double(const Eigen::VectorXd&)>& f,
                                         const Eigen::VectorXd& params, double step);

}  // namespace pilltop

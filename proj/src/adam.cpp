#include "pilltop/adam.hpp"

#include <cmath>

namespace pilltop {

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamMoments& moments,
               const AdamSettings& s) {
  if (moments.m.size() != params.size()) moments.reset(params.size());
  ++moments.t;
  moments.m = s.beta1 * moments.m + (1.0 - s.beta1) * grad;
  moments.v = s.beta2 * moments.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, moments.t);
  const double c2 = 1.0 - std::pow(s.beta2, moments.t);
  params.array() -= s.lr * (moments.m.array() / c1) / ((moments.v.array() / c2).sqrt() + s.eps);
}

}  // namespace pilltop

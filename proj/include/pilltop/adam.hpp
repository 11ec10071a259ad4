#pragma once

#include <Eigen/Core>

namespace pilltop {

struct AdamSettings {
  double lr = 8e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for one parameter block.
struct AdamMoments {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  int t = 0;

  void reset(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }
};

/// One bias-corrected Adam update in place.
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamMoments& moments,
               const AdamSettings& settings);

}  // namespace pilltop

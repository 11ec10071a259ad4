#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pilltop/geometry.hpp"

namespace pilltop {

struct DenseLayer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
};

/// Coordinate network x -> gamma(x): Fourier features, ReLU hidden layers,
/// softmax output. The frequency matrix is frozen; everything in `layers`
/// is trainable.
struct NetworkWeights {
  Eigen::MatrixXd frequencies;  // n_freq x 2
  double freq_scale = 10.0;
  std::uint64_t seed = 0;
  std::vector<DenseLayer> layers;

  int num_materials() const { return static_cast<int>(layers.back().b.size()); }
  int num_freq() const { return static_cast<int>(frequencies.rows()); }
  std::vector<int> hidden_sizes() const;

  /// Trainable parameters flattened layer by layer, W row-major then b.
  int num_trainable() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
};

/// [cos(2 pi F x), sin(2 pi F x)].
Eigen::VectorXd fourier_features(const Point& x, const Eigen::MatrixXd& frequencies);

/// Xavier-normal layer weights, zero biases, Gaussian frequencies with
/// standard deviation freq_scale. Deterministic for a given seed.
NetworkWeights init_weights(std::uint64_t seed, int num_materials, int n_freq = 64,
                            double freq_scale = 10.0, std::vector<int> hidden = {40, 40});

/// gamma at one point (length S).
Eigen::VectorXd forward(const NetworkWeights& w, const Point& x);

/// gamma at many points: S x P.
Eigen::MatrixXd forward_batch(const NetworkWeights& w, std::span<const Point> points);

/// Gradient of sum_{s,p} cotangent(s, p) gamma_s(x_p) with respect to the
/// flattened trainable parameters.
Eigen::VectorXd forward_vjp(const NetworkWeights& w, std::span<const Point> points,
                            const Eigen::MatrixXd& cotangent);

/// d gamma / d x at one point: S x 2.
Eigen::MatrixXd spatial_jacobian(const NetworkWeights& w, const Point& x);

struct PretrainSettings {
  int max_iters = 500;
  double tol = 1e-3;  // max over points and materials of |gamma_s - 1/S|
  double lr = 8e-3;
};

struct PretrainReport {
  int iterations = 0;
  double mse = 0.0;
  double max_deviation = 0.0;
  bool converged = false;
};

/// Drives gamma toward the uniform vector (1/S, ..., 1/S) on `points` with
/// Adam on a quartic misfit. Keeps the best weights seen; `converged` is false
/// when the cap was hit first.
PretrainReport pretrain_uniform(NetworkWeights& w, std::span<const Point> points,
                                const PretrainSettings& settings = {});

/// Mean over points and materials of (gamma_s - 1/S)^2.
double uniform_deviation(const NetworkWeights& w, std::span<const Point> points);

/// Text format, see README ("Network weights").
void save_weights(const NetworkWeights& w, const std::string& path);
NetworkWeights load_weights(const std::string& path);

}  // namespace pilltop

#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pilltop {

using Point = Eigen::Vector2d;

inline constexpr int kNumShapeParams = 7;
using ShapeVector = std::array<double, kNumShapeParams>;

/// Reduced Gielis supershape placed in the plane. Field order matches the
/// design vector: (cx, cy, theta, a, b, n, m).
struct SupershapeParams {
  double cx = 0.5;
  double cy = 0.5;
  double theta = 0.0;
  double a = 0.25;
  double b = 0.25;
  double n = 2.0;
  double m = 4.0;  // continuous; rounding is an export concern only

  ShapeVector to_array() const { return {cx, cy, theta, a, b, n, m}; }
  static SupershapeParams from_array(const ShapeVector& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
  }
};

inline const std::array<std::string, kNumShapeParams> kShapeParamNames = {
    "cx", "cy", "theta", "a", "b", "n", "m"};

struct BoundsBox {
  ShapeVector lower{};
  ShapeVector upper{};

  /// Throws ConfigError unless lower < upper componentwise.
  void validate() const;
  ShapeVector midpoint() const;

  /// Named initialization presets: "spike", "circle", "sunflower".
  static BoundsBox preset(const std::string& name);
};

struct PhaseSample {
  double value = 0.0;
  double distance = 0.0;
};

/// Absolute value smoothed as sqrt(u^2 + eps^2) so the radius stays
/// differentiable on the lobe symmetry axes.
inline constexpr double kSmoothAbsEps = 1e-12;

double gielis_radius(const SupershapeParams& p, double angle);

/// World -> shape-local frame: R(theta) (x - c), with R(pi/2) (1,0) = (0,-1).
Point to_local(const SupershapeParams& p, const Point& x);

/// r - R(atan2(y_loc, x_loc)); at the shape center returns -R(0).
double radial_distance(const SupershapeParams& p, const Point& x);

/// 0.5 (1 - tanh(distance / mu)).
double project_phase(double distance, double mu);

PhaseSample sample_phase(const SupershapeParams& p, const Point& x, double mu);

std::vector<double> sample_phase_field(const SupershapeParams& p,
                                       std::span<const Point> points, double mu);

/// Phase value together with its derivative with respect to each of the
/// seven shape parameters.
struct PhaseDerivative {
  double value = 0.0;
  ShapeVector d_params{};
};

PhaseDerivative sample_phase_derivative(const SupershapeParams& p, const Point& x,
                                        double mu);

/// Reverse-mode product: sum_i cotangent[i] * d phi(points[i]) / d params.
ShapeVector sample_phase_field_vjp(const SupershapeParams& p, std::span<const Point> points,
                                   double mu, std::span<const double> cotangent);

}  // namespace pilltop

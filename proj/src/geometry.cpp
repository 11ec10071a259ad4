#include "pilltop/geometry.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "pilltop/errors.hpp"

namespace pilltop {

namespace {

enum Param { kCx = 0, kCy, kTheta, kA, kB, kN, kM };

struct RadiusEval {
  double radius;
  double d_angle;
  double d_a;
  double d_b;
  double d_n;
  double d_m;
};

void check_shape(const SupershapeParams& p) {
  if (!(p.a > 0.0) || !(p.b > 0.0) || !(p.n > 0.0)) {
    std::ostringstream os;
    os << "supershape requires a, b, n > 0 (a=" << p.a << ", b=" << p.b << ", n=" << p.n << ")";
    throw InvalidGeometryError(os.str());
  }
}

// R(angle) = [sabs(cos(t)/a)^n + sabs(sin(t)/b)^n]^(-1/n), t = m angle / 4,
// together with all first derivatives.
RadiusEval radius_with_derivatives(const SupershapeParams& p, double angle) {
  check_shape(p);
  const double t = p.m * angle / 4.0;
  const double ct = std::cos(t);
  const double st = std::sin(t);
  const double u = ct / p.a;
  const double v = st / p.b;
  const double su = std::sqrt(u * u + kSmoothAbsEps * kSmoothAbsEps);
  const double sv = std::sqrt(v * v + kSmoothAbsEps * kSmoothAbsEps);
  const double A = std::pow(su, p.n);
  const double B = std::pow(sv, p.n);
  const double S = A + B;
  const double R = std::pow(S, -1.0 / p.n);
  if (!std::isfinite(R) || !(R > 0.0)) {
    std::ostringstream os;
    os << "supershape radius is not finite at angle " << angle;
    throw InvalidGeometryError(os.str());
  }

  // d(sabs(u)^n)/du = n sabs^(n-2) u
  const double dA_du = p.n * std::pow(su, p.n - 2.0) * u;
  const double dB_dv = p.n * std::pow(sv, p.n - 2.0) * v;
  const double dA_dn = A * std::log(su);
  const double dB_dn = B * std::log(sv);

  const double du_dt = -st / p.a;
  const double dv_dt = ct / p.b;
  const double dS_dt = dA_du * du_dt + dB_dv * dv_dt;
  const double dS_da = dA_du * (-ct / (p.a * p.a));
  const double dS_db = dB_dv * (-st / (p.b * p.b));
  const double dS_dn = dA_dn + dB_dn;

  // ln R = -(1/n) ln S
  const double dR_dS = -R / (p.n * S);
  RadiusEval out{};
  out.radius = R;
  out.d_angle = dR_dS * dS_dt * (p.m / 4.0);
  out.d_m = dR_dS * dS_dt * (angle / 4.0);
  out.d_a = dR_dS * dS_da;
  out.d_b = dR_dS * dS_db;
  out.d_n = R * std::log(S) / (p.n * p.n) + dR_dS * dS_dn;
  return out;
}

}  // namespace

void BoundsBox::validate() const {
  std::ostringstream os;
  for (int i = 0; i < kNumShapeParams; ++i) {
    if (!(lower[i] < upper[i])) {
      os << "bounds for '" << kShapeParamNames[i] << "' must satisfy lower < upper (got ["
         << lower[i] << ", " << upper[i] << "]); ";
    }
  }
  if (lower[kA] <= 0.0 || lower[kB] <= 0.0 || lower[kN] <= 0.0) {
    os << "lower bounds of a, b, n must be positive; ";
  }
  const std::string msg = os.str();
  if (!msg.empty()) throw ConfigError(msg);
}

ShapeVector BoundsBox::midpoint() const {
  ShapeVector mid{};
  for (int i = 0; i < kNumShapeParams; ++i) mid[i] = 0.5 * (lower[i] + upper[i]);
  return mid;
}

BoundsBox BoundsBox::preset(const std::string& name) {
  // Placement and rotation bounds are shared by all presets; the table only
  // fixes curvature, lobe count and scale (applied to a and b independently).
  constexpr double kQuarterPi = std::numbers::pi / 4.0;
  BoundsBox box;
  box.lower = {0.4, 0.4, -kQuarterPi, 0.1, 0.1, 0.0, 0.0};
  box.upper = {0.6, 0.6, kQuarterPi, 0.4, 0.4, 0.0, 0.0};
  if (name == "spike") {
    box.lower[kN] = 0.5;
    box.upper[kN] = 2.0;
    box.lower[kM] = 5.0;
    box.upper[kM] = 11.0;
  } else if (name == "circle") {
    box.lower[kN] = 1.67;
    box.upper[kN] = 2.0;
    box.lower[kM] = 1.0;
    box.upper[kM] = 3.0;
  } else if (name == "sunflower") {
    box.lower[kN] = 2.5;
    box.upper[kN] = 4.0;
    box.lower[kM] = 10.0;
    box.upper[kM] = 14.0;
  } else {
    throw ConfigError("unknown bounds preset '" + name + "' (expected spike, circle, sunflower)");
  }
  return box;
}

double gielis_radius(const SupershapeParams& p, double angle) {
  return radius_with_derivatives(p, angle).radius;
}

Point to_local(const SupershapeParams& p, const Point& x) {
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  const double dx = x.x() - p.cx;
  const double dy = x.y() - p.cy;
  return {c * dx + s * dy, -s * dx + c * dy};
}

double radial_distance(const SupershapeParams& p, const Point& x) {
  const Point loc = to_local(p, x);
  const double r = loc.norm();
  if (r == 0.0) return -gielis_radius(p, 0.0);
  return r - gielis_radius(p, std::atan2(loc.y(), loc.x()));
}

double project_phase(double distance, double mu) {
  return 0.5 * (1.0 - std::tanh(distance / mu));
}

PhaseSample sample_phase(const SupershapeParams& p, const Point& x, double mu) {
  const double d = radial_distance(p, x);
  return {project_phase(d, mu), d};
}

std::vector<double> sample_phase_field(const SupershapeParams& p, std::span<const Point> points,
                                       double mu) {
  std::vector<double> out;
  out.reserve(points.size());
  for (const Point& x : points) out.push_back(project_phase(radial_distance(p, x), mu));
  return out;
}

PhaseDerivative sample_phase_derivative(const SupershapeParams& p, const Point& x, double mu) {
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  const double dx = x.x() - p.cx;
  const double dy = x.y() - p.cy;
  const double xl = c * dx + s * dy;
  const double yl = -s * dx + c * dy;
  const double r = std::hypot(xl, yl);

  ShapeVector d_dist{};
  double dist = 0.0;
  if (r == 0.0) {
    const RadiusEval R = radius_with_derivatives(p, 0.0);
    dist = -R.radius;
    d_dist[kA] = -R.d_a;
    d_dist[kB] = -R.d_b;
    d_dist[kN] = -R.d_n;
    d_dist[kM] = -R.d_m;
  } else {
    const double angle = std::atan2(yl, xl);
    const RadiusEval R = radius_with_derivatives(p, angle);
    dist = r - R.radius;

    // Local coordinate derivatives with respect to cx, cy, theta.
    const std::array<double, 3> dxl = {-c, -s, yl};
    const std::array<double, 3> dyl = {s, -c, -xl};
    for (int i = 0; i < 3; ++i) {
      const double dr = (xl * dxl[i] + yl * dyl[i]) / r;
      const double dang = (xl * dyl[i] - yl * dxl[i]) / (r * r);
      d_dist[i] = dr - R.d_angle * dang;
    }
    d_dist[kA] = -R.d_a;
    d_dist[kB] = -R.d_b;
    d_dist[kN] = -R.d_n;
    d_dist[kM] = -R.d_m;
  }

  const double th = std::tanh(dist / mu);
  PhaseDerivative out;
  out.value = 0.5 * (1.0 - th);
  const double dphi_ddist = -0.5 * (1.0 - th * th) / mu;
  for (int i = 0; i < kNumShapeParams; ++i) out.d_params[i] = dphi_ddist * d_dist[i];
  return out;
}

ShapeVector sample_phase_field_vjp(const SupershapeParams& p, std::span<const Point> points,
                                   double mu, std::span<const double> cotangent) {
  ShapeVector grad{};
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (cotangent[i] == 0.0) continue;
    const PhaseDerivative d = sample_phase_derivative(p, points[i], mu);
    for (int j = 0; j < kNumShapeParams; ++j) grad[j] += cotangent[i] * d.d_params[j];
  }
  return grad;
}

}  // namespace pilltop

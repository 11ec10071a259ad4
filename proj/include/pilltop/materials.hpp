#pragma once

#include <span>
#include <string>
#include <vector>

namespace pilltop {

/// Phase- and excipient-independent constants of the dissolution model.
struct PhysicsConstants {
  double D_solvent = 1e-6;
  double D_solid = 5e-11;
  double C_sat = 1.0;
  double rho_s = 5.0;
  double eps_t = 1e-4;  // interface thickness
  double W = 140.0;     // double-well barrier height
  double M_phi = 2e-3;  // interface mobility
  double mu = 1e-4;     // phase projection steepness

  /// Throws ConfigError listing every violated invariant.
  void validate() const;
};

struct ExcipientLibrary {
  std::vector<std::string> names;
  std::vector<std::string> colors;  // display metadata only
  std::vector<double> rates;        // k^(s)

  std::size_t size() const { return rates.size(); }
  void validate() const;

  /// The five-material reference library (pink, blue, green, yellow, white).
  static ExcipientLibrary reference();
  static ExcipientLibrary single(double rate, const std::string& name = "excipient");
};

/// h(phi) = phi^3 (10 - 15 phi + 6 phi^2); evaluated on the raw value.
double smooth_step(double phi);
double smooth_step_derivative(double phi);

/// D(phi) = D_solvent + (D_solid - D_solvent) h(phi).
double diffusivity(double phi, const PhysicsConstants& c);
double diffusivity_derivative(double phi, const PhysicsConstants& c);

/// k = sum_s gamma_s k^(s). Throws ConfigError on a length mismatch.
double dissolution_rate(std::span<const double> gamma, const ExcipientLibrary& lib);

/// psi'(phi) for psi = W phi^2 (1 - phi)^2.
double potential_derivative(double phi, double W);
double potential_second_derivative(double phi, double W);

}  // namespace pilltop

#include "pilltop/materials.hpp"

#include <sstream>

#include "pilltop/errors.hpp"

namespace pilltop {

void PhysicsConstants::validate() const {
  std::ostringstream os;
  auto positive = [&](double v, const char* name) {
    if (!(v > 0.0)) os << "constants." << name << " must be > 0 (got " << v << "); ";
  };
  positive(D_solvent, "D_solvent");
  positive(D_solid, "D_solid");
  positive(C_sat, "C_sat");
  positive(rho_s, "rho_s");
  positive(eps_t, "eps_t");
  positive(W, "W");
  positive(M_phi, "M_phi");
  positive(mu, "mu");
  if (D_solid > 1e-2 * D_solvent) {
    os << "constants.D_solid must be <= 1e-2 * D_solvent; ";
  }
  const std::string msg = os.str();
  if (!msg.empty()) throw ConfigError(msg);
}

void ExcipientLibrary::validate() const {
  std::ostringstream os;
  if (rates.empty()) os << "excipient library must contain at least one material; ";
  for (std::size_t s = 0; s < rates.size(); ++s) {
    if (!(rates[s] >= 0.0)) os << "excipient rate " << s << " must be >= 0; ";
  }
  if (!names.empty() && names.size() != rates.size()) {
    os << "excipient names (" << names.size() << ") and rates (" << rates.size()
       << ") differ in length; ";
  }
  if (!colors.empty() && colors.size() != rates.size()) {
    os << "excipient colors (" << colors.size() << ") and rates (" << rates.size()
       << ") differ in length; ";
  }
  const std::string msg = os.str();
  if (!msg.empty()) throw ConfigError(msg);
}

ExcipientLibrary ExcipientLibrary::reference() {
  return {{"pink", "blue", "green", "yellow", "white"},
          {"#FF2FA3", "#00C2FF", "#8BE000", "#FFC700", "#FFFFFF"},
          {0.1e-4, 0.5e-4, 1.0e-4, 5.0e-4, 0.0}};
}

ExcipientLibrary ExcipientLibrary::single(double rate, const std::string& name) {
  return {{name}, {"#808080"}, {rate}};
}

double smooth_step(double phi) {
  return phi * phi * phi * (10.0 - 15.0 * phi + 6.0 * phi * phi);
}

double smooth_step_derivative(double phi) {
  // 30 phi^2 (1 - phi)^2
  const double q = phi * (1.0 - phi);
  return 30.0 * q * q;
}

double diffusivity(double phi, const PhysicsConstants& c) {
  return c.D_solvent + (c.D_solid - c.D_solvent) * smooth_step(phi);
}

double diffusivity_derivative(double phi, const PhysicsConstants& c) {
  return (c.D_solid - c.D_solvent) * smooth_step_derivative(phi);
}

double dissolution_rate(std::span<const double> gamma, const ExcipientLibrary& lib) {
  if (gamma.size() != lib.rates.size()) {
    std::ostringstream os;
    os << "material fraction vector has " << gamma.size() << " entries but the library has "
       << lib.rates.size();
    throw ConfigError(os.str());
  }
  double k = 0.0;
  for (std::size_t s = 0; s < gamma.size(); ++s) k += gamma[s] * lib.rates[s];
  return k;
}

double potential_derivative(double phi, double W) {
  return 2.0 * W * phi * (1.0 - phi) * (1.0 - 2.0 * phi);
}

double potential_second_derivative(double phi, double W) {
  // d/dphi [2W (phi - 3 phi^2 + 2 phi^3)]
  return 2.0 * W * (1.0 - 6.0 * phi + 6.0 * phi * phi);
}

}  // namespace pilltop

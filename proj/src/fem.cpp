#include "pilltop/fem.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <klu.h>

#include "pilltop/errors.hpp"

namespace pilltop {

// ---------------------------------------------------------------------------
// Mesh

StructuredMesh build_mesh(int nx, int ny, double Lx, double Ly) {
  if (nx < 2 || ny < 2) throw ConfigError("mesh requires nx >= 2 and ny >= 2");
  if (!(Lx > 0.0) || !(Ly > 0.0)) throw ConfigError("mesh dimensions must be positive");
  StructuredMesh mesh;
  mesh.nx = nx;
  mesh.ny = ny;
  mesh.Lx = Lx;
  mesh.Ly = Ly;
  const double hx = Lx / nx;
  const double hy = Ly / ny;
  mesh.nodes.reserve(static_cast<std::size_t>((nx + 1) * (ny + 1)));
  mesh.on_boundary.assign(static_cast<std::size_t>((nx + 1) * (ny + 1)), 0);
  for (int j = 0; j <= ny; ++j) {
    for (int i = 0; i <= nx; ++i) {
      mesh.nodes.emplace_back(i * hx, j * hy);
      if (i == 0 || j == 0 || i == nx || j == ny) {
        const int id = mesh.node_id(i, j);
        mesh.on_boundary[id] = 1;
        mesh.boundary_nodes.push_back(id);
      }
    }
  }
  mesh.elements.reserve(static_cast<std::size_t>(nx * ny));
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      mesh.elements.push_back({mesh.node_id(i, j), mesh.node_id(i + 1, j),
                               mesh.node_id(i + 1, j + 1), mesh.node_id(i, j + 1)});
    }
  }
  mesh.volumes.assign(mesh.elements.size(), hx * hy);
  return mesh;
}

std::vector<Point> StructuredMesh::element_centers() const {
  std::vector<Point> out;
  out.reserve(elements.size());
  for (const auto& el : elements) {
    out.push_back(0.25 * (nodes[el[0]] + nodes[el[1]] + nodes[el[2]] + nodes[el[3]]));
  }
  return out;
}

Eigen::VectorXd StructuredMesh::element_average(const Eigen::VectorXd& nodal) const {
  Eigen::VectorXd out(num_elements());
  for (int e = 0; e < num_elements(); ++e) {
    const auto& el = elements[e];
    out[e] = 0.25 * (nodal[el[0]] + nodal[el[1]] + nodal[el[2]] + nodal[el[3]]);
  }
  return out;
}

Eigen::VectorXd StructuredMesh::element_average_transpose(const Eigen::VectorXd& per_element) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(num_nodes());
  for (int e = 0; e < num_elements(); ++e) {
    for (int a : elements[e]) out[a] += 0.25 * per_element[e];
  }
  return out;
}

QuadratureRule QuadratureRule::gauss2x2() {
  const double g = 1.0 / std::sqrt(3.0);
  QuadratureRule q;
  q.points = {Eigen::Vector2d(-g, -g), Eigen::Vector2d(g, -g), Eigen::Vector2d(g, g),
              Eigen::Vector2d(-g, g)};
  q.weights = {1.0, 1.0, 1.0, 1.0};
  return q;
}

void SolverSettings::validate() const {
  std::ostringstream os;
  if (!(dt > 0.0)) os << "solver.dt must be > 0 (got " << dt << "); ";
  if (n_steps < 1) os << "solver.n_steps must be >= 1; ";
  if (!(newton_rtol > 0.0)) os << "solver.newton_rtol must be > 0; ";
  if (!(newton_atol > 0.0)) os << "solver.newton_atol must be > 0; ";
  if (newton_max < 1) os << "solver.newton_max must be >= 1; ";
  if (max_halvings < 0) os << "solver.max_halvings must be >= 0; ";
  if (!(grad_eps > 0.0)) os << "solver.grad_eps must be > 0; ";
  if (!(interface_width >= 0.0)) os << "solver.interface_width must be >= 0; ";
  const std::string msg = os.str();
  if (!msg.empty()) throw ConfigError(msg);
}

PhaseModel PhaseModel::resolve(const PhysicsConstants& c, const SolverSettings& s) {
  PhaseModel pm;
  pm.width = std::max(c.eps_t, s.interface_width);
  const double ratio = c.eps_t / pm.width;
  pm.well_mobility = c.M_phi * ratio * ratio;
  pm.gradient_coeff = c.M_phi * c.W * c.eps_t * c.eps_t;
  // Equilibrium profile of the double well at this width is
  // 0.5 (1 - tanh(d / (sqrt(2) width))).
  pm.mu = s.interface_width > 0.0 ? std::max(c.mu, std::numbers::sqrt2 * pm.width) : c.mu;
  return pm;
}

InterfaceExchange interface_exchange(double k, double C, double grad_norm,
                                     const PhysicsConstants& c) {
  const double flux = k * (c.C_sat - C) * grad_norm;
  return {-flux / c.rho_s, flux};
}

// ---------------------------------------------------------------------------
// Assembler

CoupledAssembler::CoupledAssembler(const StructuredMesh& mesh, const PhysicsConstants& constants,
                                   const SolverSettings& settings)
    : mesh_(&mesh), constants_(constants), settings_(settings) {
  settings_.validate();
  phase_ = PhaseModel::resolve(constants_, settings_);

  const QuadratureRule q = QuadratureRule::gauss2x2();
  const double hx = mesh.hx();
  const double hy = mesh.hy();
  const std::array<double, 4> xi_n = {-1.0, 1.0, 1.0, -1.0};
  const std::array<double, 4> eta_n = {-1.0, -1.0, 1.0, 1.0};
  basis_.weight = q.weights[0] * hx * hy / 4.0;
  for (int g = 0; g < 4; ++g) {
    const double xi = q.points[g].x();
    const double eta = q.points[g].y();
    for (int a = 0; a < 4; ++a) {
      basis_.N[g][a] = 0.25 * (1.0 + xi_n[a] * xi) * (1.0 + eta_n[a] * eta);
      basis_.dN[g][a] = Eigen::Vector2d(0.25 * xi_n[a] * (1.0 + eta_n[a] * eta) * 2.0 / hx,
                                        0.25 * eta_n[a] * (1.0 + xi_n[a] * xi) * 2.0 / hy);
    }
  }
  basis_.node_mass = 0.0;
  for (int g = 0; g < 4; ++g) basis_.node_mass += basis_.weight * basis_.N[g][0];
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      double s = 0.0;
      for (int g = 0; g < 4; ++g) s += basis_.weight * basis_.dN[g][a].dot(basis_.dN[g][b]);
      basis_.stiffness[a][b] = s;
    }
  }
  lumped_mass_.assign(mesh.num_nodes(), 0.0);
  for (const auto& el : mesh.elements) {
    for (int a : el) lumped_mass_[a] += basis_.node_mass;
  }
  build_pattern();
}

bool CoupledAssembler::is_dirichlet_row(int dof) const {
  const int nn = mesh_->num_nodes();
  return dof >= nn && mesh_->on_boundary[dof - nn];
}

void CoupledAssembler::build_pattern() {
  const int nn = mesh_->num_nodes();
  const int ndof = 2 * nn;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(mesh_->elements.size() * 64 + ndof);
  for (const auto& el : mesh_->elements) {
    for (int r = 0; r < 8; ++r) {
      const int row = (r < 4 ? 0 : nn) + el[r % 4];
      for (int c = 0; c < 8; ++c) {
        const int col = (c < 4 ? 0 : nn) + el[c % 4];
        trip.emplace_back(row, col, 1.0);
      }
    }
  }
  for (int i = 0; i < ndof; ++i) trip.emplace_back(i, i, 1.0);
  pattern_.resize(ndof, ndof);
  pattern_.setFromTriplets(trip.begin(), trip.end());
  pattern_.makeCompressed();

  auto slot = [&](int row, int col) {
    const int* inner = pattern_.innerIndexPtr();
    const int begin = pattern_.outerIndexPtr()[col];
    const int end = pattern_.outerIndexPtr()[col + 1];
    const int* it = std::lower_bound(inner + begin, inner + end, row);
    return static_cast<int>(it - inner);
  };

  element_slots_.resize(mesh_->elements.size());
  for (std::size_t e = 0; e < mesh_->elements.size(); ++e) {
    const auto& el = mesh_->elements[e];
    for (int r = 0; r < 8; ++r) {
      const int row = (r < 4 ? 0 : nn) + el[r % 4];
      for (int c = 0; c < 8; ++c) {
        const int col = (c < 4 ? 0 : nn) + el[c % 4];
        element_slots_[e][r * 8 + c] = is_dirichlet_row(row) ? -1 : slot(row, col);
      }
    }
  }
  for (int node : mesh_->boundary_nodes) {
    dirichlet_rows_.push_back(nn + node);
    dirichlet_diag_slots_.push_back(slot(nn + node, nn + node));
  }

  node_elements_.assign(nn, {-1, -1, -1, -1});
  for (int e = 0; e < mesh_->num_elements(); ++e) {
    for (int a : mesh_->elements[e]) {
      auto& list = node_elements_[a];
      *std::find(list.begin(), list.end(), -1) = e;
    }
  }
  node_slots_.resize(nn);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2 * nn);
  for (int a = 0; a < nn; ++a) {
    const NodalGradient g = upwind_gradient(a, zero);
    auto& sl = node_slots_[a];
    sl.fill(-1);
    const bool dirichlet = mesh_->on_boundary[a];
    for (int q = 0; q < 5; ++q) {
      if (g.nodes[q] < 0) continue;
      sl[q] = slot(a, g.nodes[q]);
      if (!dirichlet) sl[5 + q] = slot(nn + a, g.nodes[q]);
    }
    sl[10] = slot(a, nn + a);
    if (!dirichlet) sl[11] = slot(nn + a, nn + a);
  }
}

CoupledAssembler::NodalGradient CoupledAssembler::upwind_gradient(int node,
                                                                  const Eigen::VectorXd& u) const {
  const int nx = mesh_->nx;
  const int ny = mesh_->ny;
  const int i = node % (nx + 1);
  const int j = node / (nx + 1);
  NodalGradient g;
  g.nodes = {node, i > 0 ? node - 1 : -1, i < nx ? node + 1 : -1,
             j > 0 ? node - (nx + 1) : -1, j < ny ? node + (nx + 1) : -1};
  g.d.fill(0.0);
  // Eroding front (phi decreases): backward differences count only when
  // positive, forward differences only when negative. Missing neighbours
  // mirror the node, which is the zero-flux condition.
  const double phi = u[node];
  double sq = settings_.grad_eps * settings_.grad_eps;
  std::array<double, 5> dsq{};
  const double h[2] = {mesh_->hx(), mesh_->hy()};
  for (int axis = 0; axis < 2; ++axis) {
    const int lo = g.nodes[1 + 2 * axis];
    const int hi = g.nodes[2 + 2 * axis];
    const double back = lo >= 0 ? std::max((phi - u[lo]) / h[axis], 0.0) : 0.0;
    const double fwd = hi >= 0 ? std::min((u[hi] - phi) / h[axis], 0.0) : 0.0;
    sq += back * back + fwd * fwd;
    dsq[0] += 2.0 * (back - fwd) / h[axis];
    if (lo >= 0) dsq[1 + 2 * axis] = -2.0 * back / h[axis];
    if (hi >= 0) dsq[2 + 2 * axis] = 2.0 * fwd / h[axis];
  }
  const double root = std::sqrt(sq);
  g.norm = root - settings_.grad_eps;
  for (int q = 0; q < 5; ++q) g.d[q] = dsq[q] / (2.0 * root);
  return g;
}

double CoupledAssembler::nodal_rate(int node, std::span<const double> k_field) const {
  double k = 0.0;
  for (int e : node_elements_[node]) {
    if (e >= 0) k += 0.25 * mesh_->volumes[e] * k_field[e];
  }
  return k;
}

namespace {

struct ElementState {
  std::array<double, 4> phi, C, phi_prev, C_prev;
};

ElementState gather(const std::array<int, 4>& el, const Eigen::VectorXd& u,
                    const Eigen::VectorXd& u_prev, int nn) {
  ElementState s;
  for (int a = 0; a < 4; ++a) {
    s.phi[a] = u[el[a]];
    s.C[a] = u[nn + el[a]];
    s.phi_prev[a] = u_prev[el[a]];
    s.C_prev[a] = u_prev[nn + el[a]];
  }
  return s;
}

}  // namespace

void CoupledAssembler::residual(const Eigen::VectorXd& u_next, const Eigen::VectorXd& u_prev,
                                std::span<const double> k_field, Eigen::VectorXd& out) const {
  const int nn = mesh_->num_nodes();
  const auto& c = constants_;
  const double dt = settings_.dt;
  const double eps2 = settings_.grad_eps * settings_.grad_eps;
  const bool galerkin = settings_.interface_gradient == InterfaceGradient::Galerkin;
  out.setZero(2 * nn);

  for (int e = 0; e < mesh_->num_elements(); ++e) {
    const auto& el = mesh_->elements[e];
    const ElementState s = gather(el, u_next, u_prev, nn);
    const double k = galerkin ? k_field[e] : 0.0;

    std::array<double, 4> share{};  // int N_a |grad phi|
    std::array<double, 4> rc{};
    std::array<double, 4> rp{};
    for (int g = 0; g < 4; ++g) {
      Eigen::Vector2d gphi = Eigen::Vector2d::Zero();
      Eigen::Vector2d gC = Eigen::Vector2d::Zero();
      double phig = 0.0;
      for (int a = 0; a < 4; ++a) {
        gphi += s.phi[a] * basis_.dN[g][a];
        gC += s.C[a] * basis_.dN[g][a];
        phig += s.phi[a] * basis_.N[g][a];
      }
      const double rg = std::sqrt(gphi.squaredNorm() + eps2);
      const double ng = rg - settings_.grad_eps;
      const double D = diffusivity(phig, c);
      for (int a = 0; a < 4; ++a) {
        share[a] += basis_.weight * basis_.N[g][a] * ng;
        rc[a] += basis_.weight * D * basis_.dN[g][a].dot(gC);
      }
    }
    for (int a = 0; a < 4; ++a) {
      double kphi = 0.0;
      for (int b = 0; b < 4; ++b) kphi += basis_.stiffness[a][b] * s.phi[b];
      const double flux = k * (c.C_sat - s.C[a]) * share[a];
      rp[a] = basis_.node_mass * ((s.phi[a] - s.phi_prev[a]) / dt +
                                  phase_.well_mobility * potential_derivative(s.phi[a], c.W)) +
              phase_.gradient_coeff * kphi + flux / c.rho_s;
      rc[a] += basis_.node_mass * (s.C[a] - s.C_prev[a]) / dt - flux;
      out[el[a]] += rp[a];
      out[nn + el[a]] += rc[a];
    }
  }
  if (!galerkin) {
    for (int a = 0; a < nn; ++a) {
      const double flux =
          nodal_rate(a, k_field) * (c.C_sat - u_next[nn + a]) * upwind_gradient(a, u_next).norm;
      out[a] += flux / c.rho_s;
      out[nn + a] -= flux;
    }
  }
  for (int node : mesh_->boundary_nodes) out[nn + node] = u_next[nn + node];

  for (int i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) {
      std::ostringstream os;
      os << "non-finite residual in field " << (i < nn ? "phi" : "C") << " at node "
         << (i < nn ? i : i - nn);
      throw SolverError(os.str());
    }
  }
}

void CoupledAssembler::jacobian(const Eigen::VectorXd& u_next, const Eigen::VectorXd& u_prev,
                                std::span<const double> k_field, SparseMatrix& out) const {
  const int nn = mesh_->num_nodes();
  const auto& c = constants_;
  const double dt = settings_.dt;
  const double eps2 = settings_.grad_eps * settings_.grad_eps;
  const bool galerkin = settings_.interface_gradient == InterfaceGradient::Galerkin;
  if (out.nonZeros() != pattern_.nonZeros() || out.rows() != pattern_.rows()) out = pattern_;
  double* values = out.valuePtr();
  std::fill(values, values + out.nonZeros(), 0.0);

  std::array<double, 64> Ke;
  for (int e = 0; e < mesh_->num_elements(); ++e) {
    const auto& el = mesh_->elements[e];
    const ElementState s = gather(el, u_next, u_prev, nn);
    const double k = galerkin ? k_field[e] : 0.0;
    Ke.fill(0.0);
    auto K = [&](int r, int col) -> double& { return Ke[r * 8 + col]; };

    std::array<double, 4> share{};
    std::array<std::array<double, 4>, 4> dshare{};  // [a][b] d share_a / d phi_b
    for (int g = 0; g < 4; ++g) {
      Eigen::Vector2d gphi = Eigen::Vector2d::Zero();
      Eigen::Vector2d gC = Eigen::Vector2d::Zero();
      double phig = 0.0;
      for (int a = 0; a < 4; ++a) {
        gphi += s.phi[a] * basis_.dN[g][a];
        gC += s.C[a] * basis_.dN[g][a];
        phig += s.phi[a] * basis_.N[g][a];
      }
      const double rg = std::sqrt(gphi.squaredNorm() + eps2);
      const double ng = rg - settings_.grad_eps;
      const double D = diffusivity(phig, c);
      const double dD = diffusivity_derivative(phig, c);
      std::array<double, 4> dng{};
      for (int b = 0; b < 4; ++b) dng[b] = gphi.dot(basis_.dN[g][b]) / rg;
      for (int a = 0; a < 4; ++a) {
        const double wNa = basis_.weight * basis_.N[g][a];
        share[a] += wNa * ng;
        const double flux_grad = basis_.weight * basis_.dN[g][a].dot(gC);
        for (int b = 0; b < 4; ++b) {
          dshare[a][b] += wNa * dng[b];
          // C rows: diffusion
          K(4 + a, 4 + b) += basis_.weight * D * basis_.dN[g][a].dot(basis_.dN[g][b]);
          K(4 + a, b) += dD * basis_.N[g][b] * flux_grad;
        }
      }
    }
    for (int a = 0; a < 4; ++a) {
      const double drive = c.C_sat - s.C[a];
      K(a, a) += basis_.node_mass *
                 (1.0 / dt + phase_.well_mobility * potential_second_derivative(s.phi[a], c.W));
      K(a, 4 + a) += -k * share[a] / c.rho_s;
      K(4 + a, 4 + a) += basis_.node_mass / dt + k * share[a];
      for (int b = 0; b < 4; ++b) {
        K(a, b) += phase_.gradient_coeff * basis_.stiffness[a][b] +
                   k * drive * dshare[a][b] / c.rho_s;
        K(4 + a, b) += -k * drive * dshare[a][b];
      }
    }
    const auto& slots = element_slots_[e];
    for (int i = 0; i < 64; ++i) {
      if (slots[i] >= 0) values[slots[i]] += Ke[i];
    }
  }
  if (!galerkin) {
    for (int a = 0; a < nn; ++a) {
      const NodalGradient g = upwind_gradient(a, u_next);
      const double ka = nodal_rate(a, k_field);
      const double drive = ka * (c.C_sat - u_next[nn + a]);
      const auto& sl = node_slots_[a];
      for (int q = 0; q < 5; ++q) {
        if (sl[q] >= 0) values[sl[q]] += drive * g.d[q] / c.rho_s;
        if (sl[5 + q] >= 0) values[sl[5 + q]] -= drive * g.d[q];
      }
      values[sl[10]] -= ka * g.norm / c.rho_s;
      if (sl[11] >= 0) values[sl[11]] += ka * g.norm;
    }
  }
  for (int slot : dirichlet_diag_slots_) values[slot] = 1.0;
}

double CoupledAssembler::scaled_norm(const Eigen::VectorXd& r) const {
  const int nn = mesh_->num_nodes();
  const double dt = settings_.dt;
  double norm = 0.0;
  for (int i = 0; i < nn; ++i) {
    norm = std::max(norm, std::abs(r[i]) * dt / lumped_mass_[i]);
    const double scale = mesh_->on_boundary[i] ? 1.0 : dt / lumped_mass_[i];
    norm = std::max(norm, std::abs(r[nn + i]) * scale);
  }
  return norm;
}

Eigen::VectorXd CoupledAssembler::prev_state_vjp(const Eigen::VectorXd& lambda) const {
  const int nn = mesh_->num_nodes();
  Eigen::VectorXd out(2 * nn);
  for (int i = 0; i < nn; ++i) {
    const double m = lumped_mass_[i] / settings_.dt;
    out[i] = -m * lambda[i];
    out[nn + i] = mesh_->on_boundary[i] ? 0.0 : -m * lambda[nn + i];
  }
  return out;
}

Eigen::VectorXd CoupledAssembler::rate_vjp(const Eigen::VectorXd& u_next,
                                           const Eigen::VectorXd& lambda) const {
  const int nn = mesh_->num_nodes();
  const double eps2 = settings_.grad_eps * settings_.grad_eps;
  const double rho = constants_.rho_s;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(mesh_->num_elements());
  if (settings_.interface_gradient == InterfaceGradient::Upwind) {
    for (int a = 0; a < nn; ++a) {
      const double drive = (constants_.C_sat - u_next[nn + a]) * upwind_gradient(a, u_next).norm;
      double w = lambda[a] * drive / rho;
      if (!mesh_->on_boundary[a]) w -= lambda[nn + a] * drive;
      for (int e : node_elements_[a]) {
        if (e >= 0) out[e] += 0.25 * mesh_->volumes[e] * w;
      }
    }
    return out;
  }
  for (int e = 0; e < mesh_->num_elements(); ++e) {
    const auto& el = mesh_->elements[e];
    std::array<double, 4> share{};
    for (int g = 0; g < 4; ++g) {
      Eigen::Vector2d gphi = Eigen::Vector2d::Zero();
      for (int a = 0; a < 4; ++a) gphi += u_next[el[a]] * basis_.dN[g][a];
      const double rg = std::sqrt(gphi.squaredNorm() + eps2);
      const double ng = rg - settings_.grad_eps;
      for (int a = 0; a < 4; ++a) share[a] += basis_.weight * basis_.N[g][a] * ng;
    }
    double acc = 0.0;
    for (int a = 0; a < 4; ++a) {
      const double drive = (constants_.C_sat - u_next[nn + el[a]]) * share[a];
      acc += lambda[el[a]] * drive / rho;
      if (!mesh_->on_boundary[el[a]]) acc -= lambda[nn + el[a]] * drive;
    }
    out[e] = acc;
  }
  return out;
}

void CoupledAssembler::exchange_vectors(const Eigen::VectorXd& u_next,
                                        std::span<const double> k_field, Eigen::VectorXd& f_phi,
                                        Eigen::VectorXd& f_c) const {
  const int nn = mesh_->num_nodes();
  const double eps2 = settings_.grad_eps * settings_.grad_eps;
  f_phi.setZero(nn);
  f_c.setZero(nn);
  if (settings_.interface_gradient == InterfaceGradient::Upwind) {
    for (int a = 0; a < nn; ++a) {
      const InterfaceExchange x = interface_exchange(nodal_rate(a, k_field), u_next[nn + a],
                                                     upwind_gradient(a, u_next).norm, constants_);
      f_phi[a] = -x.f_diss;
      f_c[a] = x.source;
    }
    return;
  }
  for (int e = 0; e < mesh_->num_elements(); ++e) {
    const auto& el = mesh_->elements[e];
    for (int g = 0; g < 4; ++g) {
      Eigen::Vector2d gphi = Eigen::Vector2d::Zero();
      for (int a = 0; a < 4; ++a) gphi += u_next[el[a]] * basis_.dN[g][a];
      const double rg = std::sqrt(gphi.squaredNorm() + eps2);
      const double ng = rg - settings_.grad_eps;
      for (int a = 0; a < 4; ++a) {
        const InterfaceExchange x =
            interface_exchange(k_field[e], u_next[nn + el[a]], ng, constants_);
        const double w = basis_.weight * basis_.N[g][a];
        f_phi[el[a]] += -w * x.f_diss;
        f_c[el[a]] += w * x.source;
      }
    }
  }
}

std::vector<InterfaceExchange> CoupledAssembler::quadrature_exchange(
    const Eigen::VectorXd& u_next, std::span<const double> k_field) const {
  const int nn = mesh_->num_nodes();
  const double eps2 = settings_.grad_eps * settings_.grad_eps;
  std::vector<InterfaceExchange> out;
  out.reserve(mesh_->elements.size() * 4);
  for (int e = 0; e < mesh_->num_elements(); ++e) {
    const auto& el = mesh_->elements[e];
    for (int g = 0; g < 4; ++g) {
      Eigen::Vector2d gphi = Eigen::Vector2d::Zero();
      double Cg = 0.0;
      for (int a = 0; a < 4; ++a) {
        gphi += u_next[el[a]] * basis_.dN[g][a];
        Cg += u_next[nn + el[a]] * basis_.N[g][a];
      }
      const double rg = std::sqrt(gphi.squaredNorm() + eps2);
      const double ng = rg - settings_.grad_eps;
      out.push_back(interface_exchange(k_field[e], Cg, ng, constants_));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Free-function wrappers

Eigen::VectorXd pack_state(const StateFields& s) {
  Eigen::VectorXd u(s.phi.size() + s.C.size());
  u << s.phi, s.C;
  return u;
}

StateFields unpack_state(const Eigen::VectorXd& u, int num_nodes, int step) {
  StateFields s;
  s.phi = u.head(num_nodes);
  s.C = u.tail(num_nodes);
  s.step = step;
  return s;
}

Residuals assemble_residuals(const StateFields& next, const StateFields& prev,
                             std::span<const double> k_field, const PhysicsConstants& constants,
                             const StructuredMesh& mesh, const SolverSettings& settings) {
  const CoupledAssembler asm_(mesh, constants, settings);
  Eigen::VectorXd r;
  asm_.residual(pack_state(next), pack_state(prev), k_field, r);
  const int nn = mesh.num_nodes();
  return {r.head(nn), r.tail(nn)};
}

SparseMatrix assemble_jacobian(const StateFields& next, const StateFields& prev,
                               std::span<const double> k_field, const PhysicsConstants& constants,
                               const StructuredMesh& mesh, const SolverSettings& settings) {
  const CoupledAssembler asm_(mesh, constants, settings);
  SparseMatrix J;
  asm_.jacobian(pack_state(next), pack_state(prev), k_field, J);
  return J;
}

// ---------------------------------------------------------------------------
// Newton solver

// KLU keeps the symbolic analysis and, after the first numeric
// factorization, the pivot sequence; later Jacobians only refactor.
struct StepSolver::Impl {
  explicit Impl(const CoupledAssembler& a) : assembler(a), J(a.pattern()) {
    klu_defaults(&common);
    symbolic = klu_analyze(static_cast<int>(J.rows()), J.outerIndexPtr(), J.innerIndexPtr(),
                           &common);
    if (!symbolic) throw SolverError("sparse LU analysis of the step Jacobian failed");
  }

  ~Impl() {
    if (numeric) klu_free_numeric(&numeric, &common);
    if (symbolic) klu_free_symbolic(&symbolic, &common);
  }

  void factorize(const Eigen::VectorXd& u, const Eigen::VectorXd& u_prev,
                 std::span<const double> k) {
    assembler.jacobian(u, u_prev, k, J);
    if (numeric) {
      const int ok = klu_refactor(J.outerIndexPtr(), J.innerIndexPtr(), J.valuePtr(), symbolic,
                                  numeric, &common);
      // A stale pivot order can go bad when the state changes a lot.
      if (ok && klu_rcond(symbolic, numeric, &common) && common.rcond > 1e-12) return;
      klu_free_numeric(&numeric, &common);
    }
    numeric = klu_factor(J.outerIndexPtr(), J.innerIndexPtr(), J.valuePtr(), symbolic, &common);
    if (!numeric || common.status == KLU_SINGULAR) {
      throw SolverError("sparse LU factorization of the step Jacobian failed (singular matrix)");
    }
  }

  void solve(Eigen::VectorXd& rhs, bool transposed) {
    const int n = static_cast<int>(rhs.size());
    const int ok = transposed ? klu_tsolve(symbolic, numeric, n, 1, rhs.data(), &common)
                              : klu_solve(symbolic, numeric, n, 1, rhs.data(), &common);
    if (!ok) throw SolverError("sparse triangular solve failed");
  }

  const CoupledAssembler& assembler;
  SparseMatrix J;
  klu_common common;
  klu_symbolic* symbolic = nullptr;
  klu_numeric* numeric = nullptr;
};

StepSolver::StepSolver(const CoupledAssembler& assembler)
    : impl_(std::make_unique<Impl>(assembler)) {}

StepSolver::~StepSolver() = default;

StateFields StepSolver::solve(const StateFields& prev, std::span<const double> k_field,
                              StepReport* report) {
  const CoupledAssembler& A = impl_->assembler;
  const SolverSettings& s = A.settings();
  const int nn = A.mesh().num_nodes();
  const Eigen::VectorXd u_prev = pack_state(prev);
  Eigen::VectorXd u = u_prev;
  for (int node : A.mesh().boundary_nodes) u[nn + node] = 0.0;

  Eigen::VectorXd r;
  A.residual(u, u_prev, k_field, r);
  double norm = A.scaled_norm(r);
  const double tol = std::max(s.newton_atol, s.newton_rtol * (1.0 + norm));

  int it = 0;
  Eigen::VectorXd u_try;
  Eigen::VectorXd r_try;
  while (norm > tol) {
    if (it == s.newton_max) {
      std::ostringstream os;
      os << "Newton did not converge in " << s.newton_max << " iterations at step "
         << prev.step + 1 << " (scaled residual " << norm << ")";
      throw NonconvergenceError(os.str(), prev.step + 1, norm);
    }
    impl_->factorize(u, u_prev, k_field);
    Eigen::VectorXd du = -r;
    impl_->solve(du, false);
    double alpha = 1.0;
    double norm_try = 0.0;
    for (int h = 0;; ++h) {
      u_try = u + alpha * du;
      bool finite = true;
      try {
        A.residual(u_try, u_prev, k_field, r_try);
        norm_try = A.scaled_norm(r_try);
      } catch (const SolverError&) {
        finite = false;
      }
      if ((finite && norm_try <= norm) || h == s.max_halvings) {
        if (!finite) A.residual(u_try, u_prev, k_field, r_try);  // rethrows with diagnostic
        break;
      }
      alpha *= 0.5;
    }
    u.swap(u_try);
    r.swap(r_try);
    norm = norm_try;
    ++it;
  }
  if (report) {
    report->newton_iterations = it;
    report->residual_norm = norm;
  }
  return unpack_state(u, nn, prev.step + 1);
}

Eigen::VectorXd StepSolver::solve_transposed(const Eigen::VectorXd& u_next,
                                             const Eigen::VectorXd& u_prev,
                                             std::span<const double> k_field,
                                             const Eigen::VectorXd& rhs) {
  impl_->factorize(u_next, u_prev, k_field);
  Eigen::VectorXd x = rhs;
  impl_->solve(x, true);
  if (!x.allFinite()) throw SolverError("transposed step system produced non-finite values");
  return x;
}

StateFields solve_timestep(const StateFields& prev, std::span<const double> k_field,
                           const PhysicsConstants& constants, const StructuredMesh& mesh,
                           const SolverSettings& settings) {
  const CoupledAssembler assembler(mesh, constants, settings);
  StepSolver solver(assembler);
  return solver.solve(prev, k_field);
}

double solid_mass(const StructuredMesh& mesh, const Eigen::VectorXd& phi, double rho_s) {
  const Eigen::VectorXd centers = mesh.element_average(phi);
  double m = 0.0;
  for (int e = 0; e < mesh.num_elements(); ++e) m += centers[e] * mesh.volumes[e];
  return rho_s * m;
}

SimulationResult simulate(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const CoupledAssembler& assembler, int store_stride,
                          const StepObserver& observer) {
  const StructuredMesh& mesh = assembler.mesh();
  const int n_steps = assembler.settings().n_steps;
  if (phi0.size() != mesh.num_nodes()) throw ConfigError("phi0 length does not match the mesh");
  if (static_cast<int>(k_field.size()) != mesh.num_elements()) {
    throw ConfigError("k_field length does not match the element count");
  }
  if (store_stride < 1) store_stride = 1;

  StepSolver solver(assembler);
  SimulationResult out;
  StateFields state{phi0, Eigen::VectorXd::Zero(mesh.num_nodes()), 0};
  const double rho = assembler.constants().rho_s;
  out.stored.push_back(state);
  out.phi_centers.push_back(mesh.element_average(state.phi));
  out.mass.push_back(rho * out.phi_centers.back().dot(Eigen::Map<const Eigen::VectorXd>(
                               mesh.volumes.data(), mesh.num_elements())));
  if (observer) observer(state);
  for (int n = 0; n < n_steps; ++n) {
    StepReport rep;
    state = solver.solve(state, k_field, &rep);
    out.newton_iterations += rep.newton_iterations;
    out.phi_centers.push_back(mesh.element_average(state.phi));
    out.mass.push_back(rho * out.phi_centers.back().dot(Eigen::Map<const Eigen::VectorXd>(
                                 mesh.volumes.data(), mesh.num_elements())));
    if (state.step % store_stride == 0 || state.step == n_steps) out.stored.push_back(state);
    if (observer) observer(state);
  }
  return out;
}

SimulationResult simulate(const Eigen::VectorXd& phi0, std::span<const double> k_field,
                          const PhysicsConstants& constants, const StructuredMesh& mesh,
                          const SolverSettings& settings) {
  const CoupledAssembler assembler(mesh, constants, settings);
  return simulate(phi0, k_field, assembler, 1);
}

}  // namespace pilltop

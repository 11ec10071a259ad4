#include "pilltop/matfield.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "pilltop/adam.hpp"
#include "pilltop/errors.hpp"

namespace pilltop {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Eigen::MatrixXd feature_matrix(const Eigen::MatrixXd& F, std::span<const Point> points) {
  const Eigen::Index nf = F.rows();
  const Eigen::Index P = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd X(2, P);
  for (Eigen::Index p = 0; p < P; ++p) X.col(p) = points[p];
  const Eigen::MatrixXd arg = kTwoPi * F * X;
  Eigen::MatrixXd out(2 * nf, P);
  out.topRows(nf) = arg.array().cos().matrix();
  out.bottomRows(nf) = arg.array().sin().matrix();
  return out;
}

void softmax_columns(Eigen::MatrixXd& Z) {
  for (Eigen::Index p = 0; p < Z.cols(); ++p) {
    auto col = Z.col(p);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
}

// Pre-activations of every layer, kept for the reverse pass.
struct Cache {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each hidden layer
  Eigen::MatrixXd gamma;
};

Cache run_forward(const NetworkWeights& w, std::span<const Point> points) {
  Cache c;
  Eigen::MatrixXd a = feature_matrix(w.frequencies, points);
  const std::size_t L = w.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    c.inputs.push_back(a);
    Eigen::MatrixXd z = w.layers[l].W * a;
    z.colwise() += w.layers[l].b;
    if (l + 1 < L) {
      c.pre.push_back(z);
      a = z.cwiseMax(0.0);
    } else {
      softmax_columns(z);
      c.gamma = std::move(z);
    }
  }
  return c;
}

}  // namespace

std::vector<int> NetworkWeights::hidden_sizes() const {
  std::vector<int> out;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    out.push_back(static_cast<int>(layers[l].b.size()));
  }
  return out;
}

int NetworkWeights::num_trainable() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) n += l.W.size() + l.b.size();
  return static_cast<int>(n);
}

Eigen::VectorXd NetworkWeights::flatten() const {
  Eigen::VectorXd out(num_trainable());
  Eigen::Index k = 0;
  for (const auto& l : layers) {
    for (Eigen::Index i = 0; i < l.W.rows(); ++i) {
      for (Eigen::Index j = 0; j < l.W.cols(); ++j) out[k++] = l.W(i, j);
    }
    for (Eigen::Index i = 0; i < l.b.size(); ++i) out[k++] = l.b[i];
  }
  return out;
}

void NetworkWeights::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != num_trainable()) {
    throw ConfigError("flat weight vector has the wrong length");
  }
  Eigen::Index k = 0;
  for (auto& l : layers) {
    for (Eigen::Index i = 0; i < l.W.rows(); ++i) {
      for (Eigen::Index j = 0; j < l.W.cols(); ++j) l.W(i, j) = flat[k++];
    }
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = flat[k++];
  }
}

Eigen::VectorXd fourier_features(const Point& x, const Eigen::MatrixXd& frequencies) {
  const std::array<Point, 1> pts = {x};
  return feature_matrix(frequencies, pts).col(0);
}

NetworkWeights init_weights(std::uint64_t seed, int num_materials, int n_freq,
                            double freq_scale, std::vector<int> hidden) {
  if (num_materials < 1) throw ConfigError("network needs at least one material");
  if (n_freq < 1) throw ConfigError("network.n_freq must be >= 1");
  NetworkWeights w;
  w.seed = seed;
  w.freq_scale = freq_scale;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  w.frequencies.resize(n_freq, 2);
  for (int i = 0; i < n_freq; ++i) {
    for (int j = 0; j < 2; ++j) w.frequencies(i, j) = freq_scale * normal(rng);
  }
  std::vector<int> sizes = {2 * n_freq};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(num_materials);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int fan_in = sizes[l];
    const int fan_out = sizes[l + 1];
    const double sd = std::sqrt(2.0 / (fan_in + fan_out));
    DenseLayer layer;
    layer.W.resize(fan_out, fan_in);
    for (int i = 0; i < fan_out; ++i) {
      for (int j = 0; j < fan_in; ++j) layer.W(i, j) = sd * normal(rng);
    }
    layer.b = Eigen::VectorXd::Zero(fan_out);
    w.layers.push_back(std::move(layer));
  }
  return w;
}

Eigen::VectorXd forward(const NetworkWeights& w, const Point& x) {
  const std::array<Point, 1> pts = {x};
  return forward_batch(w, pts).col(0);
}

Eigen::MatrixXd forward_batch(const NetworkWeights& w, std::span<const Point> points) {
  return run_forward(w, points).gamma;
}

Eigen::VectorXd forward_vjp(const NetworkWeights& w, std::span<const Point> points,
                            const Eigen::MatrixXd& cotangent) {
  const Cache c = run_forward(w, points);
  // softmax: dz = gamma * (g - <gamma, g>)
  Eigen::MatrixXd dz = cotangent;
  for (Eigen::Index p = 0; p < dz.cols(); ++p) {
    const double inner = c.gamma.col(p).dot(cotangent.col(p));
    dz.col(p) = c.gamma.col(p).cwiseProduct((cotangent.col(p).array() - inner).matrix());
  }
  const std::size_t L = w.layers.size();
  std::vector<Eigen::MatrixXd> dW(L);
  std::vector<Eigen::VectorXd> db(L);
  for (std::size_t l = L; l-- > 0;) {
    dW[l] = dz * c.inputs[l].transpose();
    db[l] = dz.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd da = w.layers[l].W.transpose() * dz;
    const Eigen::MatrixXd& z = c.pre[l - 1];
    dz = (z.array() > 0.0).select(da, 0.0);
  }
  Eigen::VectorXd out(w.num_trainable());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < L; ++l) {
    for (Eigen::Index i = 0; i < dW[l].rows(); ++i) {
      for (Eigen::Index j = 0; j < dW[l].cols(); ++j) out[k++] = dW[l](i, j);
    }
    for (Eigen::Index i = 0; i < db[l].size(); ++i) out[k++] = db[l][i];
  }
  return out;
}

Eigen::MatrixXd spatial_jacobian(const NetworkWeights& w, const Point& x) {
  const Eigen::Index nf = w.frequencies.rows();
  const Eigen::VectorXd arg = kTwoPi * w.frequencies * x;
  Eigen::VectorXd a(2 * nf);
  Eigen::MatrixXd da(2 * nf, 2);
  for (Eigen::Index i = 0; i < nf; ++i) {
    const double c = std::cos(arg[i]);
    const double s = std::sin(arg[i]);
    a[i] = c;
    a[nf + i] = s;
    da.row(i) = -s * kTwoPi * w.frequencies.row(i);
    da.row(nf + i) = c * kTwoPi * w.frequencies.row(i);
  }
  const std::size_t L = w.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::VectorXd z = w.layers[l].W * a + w.layers[l].b;
    Eigen::MatrixXd dz = w.layers[l].W * da;
    if (l + 1 < L) {
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (z[i] <= 0.0) dz.row(i).setZero();
      }
      a = z.cwiseMax(0.0);
      da = std::move(dz);
    } else {
      z.array() -= z.maxCoeff();
      Eigen::VectorXd g = z.array().exp().matrix();
      g /= g.sum();
      // d softmax = (diag(g) - g g^T) dz
      const Eigen::RowVector2d mean = g.transpose() * dz;
      Eigen::MatrixXd out(g.size(), 2);
      for (Eigen::Index s = 0; s < g.size(); ++s) out.row(s) = g[s] * (dz.row(s) - mean);
      return out;
    }
  }
  return {};
}

double uniform_deviation(const NetworkWeights& w, std::span<const Point> points) {
  const Eigen::MatrixXd g = forward_batch(w, points);
  const double u = 1.0 / static_cast<double>(g.rows());
  return (g.array() - u).square().mean();
}

PretrainReport pretrain_uniform(NetworkWeights& w, std::span<const Point> points,
                                const PretrainSettings& settings) {
  PretrainReport report;
  const int S = w.num_materials();
  if (S == 1 || points.empty()) {
    report.converged = true;
    return report;
  }
  const double u = 1.0 / S;
  const double count = static_cast<double>(S) * static_cast<double>(points.size());
  Eigen::VectorXd theta = w.flatten();
  Eigen::VectorXd best = theta;
  double best_dev = std::numeric_limits<double>::infinity();
  double best_mse = best_dev;
  AdamMoments moments;
  moments.reset(theta.size());
  AdamSettings adam;
  adam.lr = settings.lr;

  for (int it = 0;; ++it) {
    const Eigen::MatrixXd g = forward_batch(w, points);
    const double mse = (g.array() - u).square().sum() / count;
    const double dev = (g.array() - u).abs().maxCoeff();
    if (dev < best_dev) {
      best_dev = dev;
      best_mse = mse;
      best = theta;
    }
    report.iterations = it;
    if (dev <= settings.tol) {
      report.converged = true;
      break;
    }
    if (it == settings.max_iters) break;
    // Quartic loss sum (gamma - 1/S)^4: the plain MSE leaves a slow tail at
    // a few outlier points. Rescaled by the current max deviation so the
    // gradient stays clear of Adam's epsilon.
    const Eigen::ArrayXXd d = (g.array() - u) / dev;
    const Eigen::MatrixXd cot = d.cube().matrix();
    const Eigen::VectorXd grad = forward_vjp(w, points, cot);
    adam_step(theta, grad, moments, adam);
    w.unflatten(theta);
  }
  w.unflatten(best);
  report.mse = best_mse;
  report.max_deviation = best_dev;
  return report;
}

void save_weights(const NetworkWeights& w, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write network weights to " + path);
  out << std::setprecision(17);
  out << "format_version 1\n";
  out << "materials " << w.num_materials() << "\n";
  out << "n_freq " << w.num_freq() << "\n";
  out << "freq_scale " << w.freq_scale << "\n";
  out << "seed " << w.seed << "\n";
  out << "layers " << w.layers.size();
  for (const auto& l : w.layers) out << " " << l.W.rows() << "x" << l.W.cols();
  out << "\n";
  out << "frequencies\n";
  for (Eigen::Index i = 0; i < w.frequencies.rows(); ++i) {
    out << w.frequencies(i, 0) << " " << w.frequencies(i, 1) << "\n";
  }
  out << "trainable " << w.num_trainable() << "\n";
  const Eigen::VectorXd flat = w.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i) out << flat[i] << "\n";
}

NetworkWeights load_weights(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read network weights from " + path);
  auto expect = [&](const std::string& key) {
    std::string got;
    in >> got;
    if (got != key) {
      throw ConfigError("weights file " + path + ": expected '" + key + "', found '" + got + "'");
    }
  };
  int version = 0;
  int S = 0;
  int nf = 0;
  std::size_t L = 0;
  NetworkWeights w;
  expect("format_version");
  in >> version;
  if (version != 1) throw ConfigError("unsupported weights format_version in " + path);
  expect("materials");
  in >> S;
  expect("n_freq");
  in >> nf;
  expect("freq_scale");
  in >> w.freq_scale;
  expect("seed");
  in >> w.seed;
  expect("layers");
  in >> L;
  for (std::size_t l = 0; l < L; ++l) {
    std::string shape;
    in >> shape;
    const auto x = shape.find('x');
    if (x == std::string::npos) throw ConfigError("bad layer shape in " + path);
    DenseLayer layer;
    layer.W = Eigen::MatrixXd::Zero(std::stoi(shape.substr(0, x)), std::stoi(shape.substr(x + 1)));
    layer.b = Eigen::VectorXd::Zero(layer.W.rows());
    w.layers.push_back(std::move(layer));
  }
  expect("frequencies");
  w.frequencies.resize(nf, 2);
  for (int i = 0; i < nf; ++i) in >> w.frequencies(i, 0) >> w.frequencies(i, 1);
  expect("trainable");
  int n = 0;
  in >> n;
  if (n != w.num_trainable() || L == 0 || w.num_materials() != S) {
    throw ConfigError("weights file " + path + " has inconsistent sizes");
  }
  Eigen::VectorXd flat(n);
  for (int i = 0; i < n; ++i) in >> flat[i];
  if (!in) throw ConfigError("weights file " + path + " is truncated");
  w.unflatten(flat);
  return w;
}

}  // namespace pilltop

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "pilltop/cli.hpp"
#include "pilltop/errors.hpp"

namespace pilltop {

using nlohmann::json;

std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::Simulate: return "simulate";
    case RunMode::Optimize: return "optimize";
    case RunMode::Gradcheck: return "gradcheck";
  }
  return "?";
}

RunMode parse_mode(const std::string& s) {
  if (s == "simulate") return RunMode::Simulate;
  if (s == "optimize") return RunMode::Optimize;
  if (s == "gradcheck") return RunMode::Gradcheck;
  throw ConfigError("unknown mode '" + s + "' (expected simulate, optimize, gradcheck)");
}

namespace {

// Collects problems instead of stopping at the first one.
class Reader {
 public:
  std::vector<std::string> errors;

  bool object(const json& j, const std::string& path, std::initializer_list<const char*> known) {
    if (!j.is_object()) {
      errors.push_back(path + ": expected an object");
      return false;
    }
    for (const auto& [key, _] : j.items()) {
      if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
        errors.push_back(path + "." + key + ": unknown key");
      }
    }
    return true;
  }

  void number(const json& j, const char* key, const std::string& path, double& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number()) {
      errors.push_back(path + "." + key + ": expected a number");
      return;
    }
    out = v.get<double>();
  }

  void integer(const json& j, const char* key, const std::string& path, int& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number_integer()) {
      errors.push_back(path + "." + key + ": expected an integer");
      return;
    }
    out = v.get<int>();
  }

  void boolean(const json& j, const char* key, const std::string& path, bool& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_boolean()) {
      errors.push_back(path + "." + key + ": expected true or false");
      return;
    }
    out = v.get<bool>();
  }

  void string(const json& j, const char* key, const std::string& path, std::string& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_string()) {
      errors.push_back(path + "." + key + ": expected a string");
      return;
    }
    out = v.get<std::string>();
  }

  template <typename T>
  void list(const json& j, const char* key, const std::string& path, std::vector<T>& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    const bool ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) {
      if constexpr (std::is_integral_v<T>) return e.is_number_integer();
      return e.is_number();
    });
    if (!ok) {
      errors.push_back(path + "." + key + ": expected an array of numbers");
      return;
    }
    out = v.get<std::vector<T>>();
  }

  // Runs a validator that throws ConfigError and keeps its message.
  template <typename F>
  void check(F&& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      std::size_t start = 0;
      while (start < msg.size()) {
        auto end = msg.find("; ", start);
        if (end == std::string::npos) end = msg.size();
        if (end > start) errors.push_back(msg.substr(start, end - start));
        start = end + 2;
      }
    }
  }
};

SupershapeParams read_shape(Reader& r, const json& j, const std::string& path) {
  SupershapeParams p;
  if (!r.object(j, path, {"cx", "cy", "theta", "a", "b", "n", "m"})) return p;
  r.number(j, "cx", path, p.cx);
  r.number(j, "cy", path, p.cy);
  r.number(j, "theta", path, p.theta);
  r.number(j, "a", path, p.a);
  r.number(j, "b", path, p.b);
  r.number(j, "n", path, p.n);
  r.number(j, "m", path, p.m);
  return p;
}

json shape_json(const SupershapeParams& p) {
  return {{"cx", p.cx}, {"cy", p.cy}, {"theta", p.theta}, {"a", p.a},
          {"b", p.b},   {"n", p.n},   {"m", p.m}};
}

}  // namespace

RunConfig parse_config(const std::string& text, std::optional<RunMode> mode_override,
                       const std::string& base_dir) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (root.is_null()) root = json::object();

  Reader r;
  RunConfig c;
  if (!r.object(root, "config",
                {"format_version", "mode", "mesh", "constants", "library", "solver", "shape",
                 "network", "optimizer", "target", "output"})) {
    throw ConfigError(r.errors.front());
  }
  if (root.contains("format_version")) {
    int v = 0;
    r.integer(root, "format_version", "config", v);
    if (v != kFormatVersion) r.errors.push_back("config.format_version: unsupported version");
  }
  if (root.contains("mode")) {
    std::string m;
    r.string(root, "mode", "config", m);
    r.check([&] { c.mode = parse_mode(m); });
  }
  if (mode_override) c.mode = *mode_override;

  if (root.contains("mesh") && r.object(root["mesh"], "mesh", {"nx", "ny", "Lx", "Ly"})) {
    const json& j = root["mesh"];
    r.integer(j, "nx", "mesh", c.mesh.nx);
    r.integer(j, "ny", "mesh", c.mesh.ny);
    r.number(j, "Lx", "mesh", c.mesh.Lx);
    r.number(j, "Ly", "mesh", c.mesh.Ly);
  }
  if (c.mesh.nx < 2) r.errors.push_back("mesh.nx must be >= 2");
  if (c.mesh.ny < 2) r.errors.push_back("mesh.ny must be >= 2");
  if (!(c.mesh.Lx > 0.0)) r.errors.push_back("mesh.Lx must be > 0");
  if (!(c.mesh.Ly > 0.0)) r.errors.push_back("mesh.Ly must be > 0");

  if (root.contains("constants") &&
      r.object(root["constants"], "constants",
               {"D_solvent", "D_solid", "C_sat", "rho_s", "eps_t", "W", "M_phi", "mu"})) {
    const json& j = root["constants"];
    auto& k = c.constants;
    r.number(j, "D_solvent", "constants", k.D_solvent);
    r.number(j, "D_solid", "constants", k.D_solid);
    r.number(j, "C_sat", "constants", k.C_sat);
    r.number(j, "rho_s", "constants", k.rho_s);
    r.number(j, "eps_t", "constants", k.eps_t);
    r.number(j, "W", "constants", k.W);
    r.number(j, "M_phi", "constants", k.M_phi);
    r.number(j, "mu", "constants", k.mu);
  }
  r.check([&] { c.constants.validate(); });

  if (root.contains("library") && r.object(root["library"], "library", {"preset", "materials"})) {
    const json& j = root["library"];
    if (j.contains("preset") && j.contains("materials")) {
      r.errors.push_back("library: give either preset or materials, not both");
    }
    std::string preset;
    r.string(j, "preset", "library", preset);
    if (!preset.empty() && preset != "reference") {
      r.errors.push_back("library.preset: unknown preset '" + preset + "' (expected reference)");
    }
    if (j.contains("materials")) {
      const json& m = j["materials"];
      if (!m.is_array() || m.empty()) {
        r.errors.push_back("library.materials: expected a non-empty array");
      } else {
        ExcipientLibrary lib;
        for (std::size_t i = 0; i < m.size(); ++i) {
          const std::string path = "library.materials[" + std::to_string(i) + "]";
          if (!r.object(m[i], path, {"name", "color", "k"})) continue;
          std::string name = "material" + std::to_string(i);
          std::string color = "#808080";
          double k = -1.0;
          r.string(m[i], "name", path, name);
          r.string(m[i], "color", path, color);
          if (!m[i].contains("k")) r.errors.push_back(path + ".k: required");
          r.number(m[i], "k", path, k);
          lib.names.push_back(name);
          lib.colors.push_back(color);
          lib.rates.push_back(k);
        }
        c.library = lib;
      }
    }
  }
  r.check([&] { c.library.validate(); });

  if (root.contains("solver") &&
      r.object(root["solver"], "solver",
               {"dt", "n_steps", "newton_rtol", "newton_atol", "newton_max", "max_halvings",
                "grad_eps", "interface_width", "interface_gradient", "checkpoint_spacing"})) {
    const json& j = root["solver"];
    auto& s = c.solver;
    r.number(j, "dt", "solver", s.dt);
    r.integer(j, "n_steps", "solver", s.n_steps);
    r.number(j, "newton_rtol", "solver", s.newton_rtol);
    r.number(j, "newton_atol", "solver", s.newton_atol);
    r.integer(j, "newton_max", "solver", s.newton_max);
    r.integer(j, "max_halvings", "solver", s.max_halvings);
    r.number(j, "grad_eps", "solver", s.grad_eps);
    r.number(j, "interface_width", "solver", s.interface_width);
    r.integer(j, "checkpoint_spacing", "solver", c.optimizer.checkpoint_spacing);
    std::string g;
    r.string(j, "interface_gradient", "solver", g);
    if (g == "galerkin") {
      s.interface_gradient = InterfaceGradient::Galerkin;
    } else if (!g.empty() && g != "upwind") {
      r.errors.push_back("solver.interface_gradient: expected upwind or galerkin");
    }
  }
  r.check([&] { c.solver.validate(); });
  if (c.optimizer.checkpoint_spacing < 0) {
    r.errors.push_back("solver.checkpoint_spacing must be >= 0");
  }

  if (root.contains("shape") && r.object(root["shape"], "shape", {"bounds", "initial"})) {
    const json& j = root["shape"];
    if (j.contains("bounds")) {
      const json& b = j["bounds"];
      if (b.is_string()) {
        c.bounds_preset = b.get<std::string>();
        r.check([&] { c.bounds = BoundsBox::preset(c.bounds_preset); });
      } else if (r.object(b, "shape.bounds", {"lower", "upper"})) {
        std::vector<double> lo;
        std::vector<double> hi;
        r.list(b, "lower", "shape.bounds", lo);
        r.list(b, "upper", "shape.bounds", hi);
        if (lo.size() != kNumShapeParams || hi.size() != kNumShapeParams) {
          r.errors.push_back("shape.bounds: lower and upper need 7 values (cx, cy, theta, a, b, n, m)");
        } else {
          c.bounds_preset = "custom";
          std::copy(lo.begin(), lo.end(), c.bounds.lower.begin());
          std::copy(hi.begin(), hi.end(), c.bounds.upper.begin());
          r.check([&] { c.bounds.validate(); });
        }
      }
    }
    if (j.contains("initial")) c.initial_shape = read_shape(r, j["initial"], "shape.initial");
  }
  if (c.initial_shape && c.mode != RunMode::Simulate) {
    r.check([&] { to_latent(*c.initial_shape, c.bounds); });
  }

  if (root.contains("network") &&
      r.object(root["network"], "network",
               {"n_freq", "freq_scale", "hidden", "seed", "pretrain_iters", "pretrain_tol",
                "pretrain_lr", "weights_file"})) {
    const json& j = root["network"];
    auto& n = c.network;
    r.integer(j, "n_freq", "network", n.n_freq);
    r.number(j, "freq_scale", "network", n.freq_scale);
    r.list(j, "hidden", "network", n.hidden);
    if (j.contains("seed")) {
      if (j["seed"].is_number_unsigned() || (j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0)) {
        n.seed = j["seed"].get<std::uint64_t>();
      } else {
        r.errors.push_back("network.seed: expected a non-negative integer");
      }
    }
    r.integer(j, "pretrain_iters", "network", n.pretrain.max_iters);
    r.number(j, "pretrain_tol", "network", n.pretrain.tol);
    r.number(j, "pretrain_lr", "network", n.pretrain.lr);
    r.string(j, "weights_file", "network", n.weights_file);
    if (!n.weights_file.empty() && std::filesystem::path(n.weights_file).is_relative()) {
      n.weights_file = (std::filesystem::path(base_dir) / n.weights_file).string();
    }
  }
  if (c.network.n_freq < 1) r.errors.push_back("network.n_freq must be >= 1");
  if (!(c.network.freq_scale > 0.0)) r.errors.push_back("network.freq_scale must be > 0");
  if (c.network.hidden.empty() ||
      std::any_of(c.network.hidden.begin(), c.network.hidden.end(), [](int h) { return h < 1; })) {
    r.errors.push_back("network.hidden must list positive layer widths");
  }
  if (c.network.pretrain.max_iters < 0) r.errors.push_back("network.pretrain_iters must be >= 0");

  if (root.contains("optimizer") &&
      r.object(root["optimizer"], "optimizer",
               {"lr", "grad_clip_norm", "max_iters", "loss_tol", "xi_init", "xi_step", "xi_final",
                "lambda_star", "alpha", "tau0", "nu", "mask_grayness"})) {
    const json& j = root["optimizer"];
    auto& o = c.optimizer;
    r.number(j, "lr", "optimizer", o.lr);
    r.number(j, "grad_clip_norm", "optimizer", o.grad_clip_norm);
    r.integer(j, "max_iters", "optimizer", o.max_iters);
    r.number(j, "loss_tol", "optimizer", o.loss_tol);
    r.number(j, "xi_init", "optimizer", o.xi_init);
    r.number(j, "xi_step", "optimizer", o.xi_step);
    r.number(j, "xi_final", "optimizer", o.xi_final);
    if (j.contains("lambda_star") && j["lambda_star"].is_number()) {
      o.lambda_star.assign(c.library.size(), j["lambda_star"].get<double>());
    } else {
      r.list(j, "lambda_star", "optimizer", o.lambda_star);
    }
    r.number(j, "alpha", "optimizer", o.alpha);
    r.number(j, "tau0", "optimizer", o.tau0);
    r.number(j, "nu", "optimizer", o.nu);
    r.boolean(j, "mask_grayness", "optimizer", o.mask_grayness);
  }
  r.check([&] { c.optimizer.validate(static_cast<int>(c.library.size())); });

  if (root.contains("target") &&
      r.object(root["target"], "target", {"file", "mdot", "self", "reference"})) {
    const json& j = root["target"];
    auto& t = c.target;
    int sources = 0;
    if (j.contains("file")) {
      ++sources;
      t.source = TargetConfig::Source::File;
      r.string(j, "file", "target", t.file);
      if (std::filesystem::path(t.file).is_relative()) {
        t.file = (std::filesystem::path(base_dir) / t.file).string();
      }
    }
    if (j.contains("mdot")) {
      ++sources;
      t.source = TargetConfig::Source::Inline;
      r.list(j, "mdot", "target", t.mdot);
      if (!t.mdot.empty() && static_cast<int>(t.mdot.size()) != c.solver.n_steps) {
        r.errors.push_back("target.mdot has " + std::to_string(t.mdot.size()) +
                           " samples but solver.n_steps is " + std::to_string(c.solver.n_steps));
      }
    }
    if (j.contains("self")) {
      bool self = false;
      r.boolean(j, "self", "target", self);
      if (self) {
        ++sources;
        t.source = TargetConfig::Source::Self;
      }
    }
    if (j.contains("reference") &&
        r.object(j["reference"], "target.reference", {"shape", "rate"})) {
      ++sources;
      t.source = TargetConfig::Source::Reference;
      const json& ref = j["reference"];
      if (ref.contains("shape")) t.reference_shape = read_shape(r, ref["shape"], "target.reference.shape");
      if (ref.contains("rate")) {
        double k = -1.0;
        r.number(ref, "rate", "target.reference", k);
        if (!(k >= 0.0)) r.errors.push_back("target.reference.rate must be >= 0");
        t.reference_rate = k;
      }
    }
    if (sources > 1) r.errors.push_back("target: give exactly one of file, mdot, self, reference");
  }
  if (c.mode == RunMode::Optimize && c.target.source == TargetConfig::Source::None) {
    r.errors.push_back("target: a target profile is required in optimize mode");
  }

  if (root.contains("output") &&
      r.object(root["output"], "output",
               {"dir", "field_stride", "gradcheck_coords", "gradcheck_step", "gradcheck_tol",
                "dump_adjoint_norms"})) {
    const json& j = root["output"];
    auto& o = c.output;
    r.string(j, "dir", "output", o.dir);
    r.integer(j, "field_stride", "output", o.field_stride);
    r.integer(j, "gradcheck_coords", "output", o.gradcheck_coords);
    r.number(j, "gradcheck_step", "output", o.gradcheck_step);
    r.number(j, "gradcheck_tol", "output", o.gradcheck_tol);
    r.boolean(j, "dump_adjoint_norms", "output", o.dump_adjoint_norms);
  }
  if (c.output.field_stride < 0) r.errors.push_back("output.field_stride must be >= 0");
  if (c.output.gradcheck_coords < 0) r.errors.push_back("output.gradcheck_coords must be >= 0");
  if (!(c.output.gradcheck_step > 0.0)) r.errors.push_back("output.gradcheck_step must be > 0");

  if (!r.errors.empty()) {
    std::string all;
    for (const auto& e : r.errors) all += (all.empty() ? "" : "\n") + e;
    throw ConfigError(all);
  }
  return c;
}

RunConfig load_config(const std::string& path, std::optional<RunMode> mode_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), mode_override,
                      std::filesystem::path(path).parent_path().string().empty()
                          ? "."
                          : std::filesystem::path(path).parent_path().string());
}

std::string dump_config(const RunConfig& c) {
  json j;
  j["format_version"] = kFormatVersion;
  j["mode"] = to_string(c.mode);
  j["mesh"] = {{"nx", c.mesh.nx}, {"ny", c.mesh.ny}, {"Lx", c.mesh.Lx}, {"Ly", c.mesh.Ly}};
  const auto& k = c.constants;
  j["constants"] = {{"D_solvent", k.D_solvent}, {"D_solid", k.D_solid}, {"C_sat", k.C_sat},
                    {"rho_s", k.rho_s},         {"eps_t", k.eps_t},     {"W", k.W},
                    {"M_phi", k.M_phi},         {"mu", k.mu}};
  json mats = json::array();
  for (std::size_t s = 0; s < c.library.size(); ++s) {
    mats.push_back({{"name", c.library.names.at(s)},
                    {"color", c.library.colors.at(s)},
                    {"k", c.library.rates[s]}});
  }
  j["library"] = {{"materials", mats}};
  const auto& s = c.solver;
  j["solver"] = {{"dt", s.dt},
                 {"n_steps", s.n_steps},
                 {"newton_rtol", s.newton_rtol},
                 {"newton_atol", s.newton_atol},
                 {"newton_max", s.newton_max},
                 {"max_halvings", s.max_halvings},
                 {"grad_eps", s.grad_eps},
                 {"interface_width", s.interface_width},
                 {"interface_gradient",
                  s.interface_gradient == InterfaceGradient::Upwind ? "upwind" : "galerkin"},
                 {"checkpoint_spacing", c.optimizer.checkpoint_spacing}};
  json shape;
  if (c.bounds_preset == "custom") {
    shape["bounds"] = {{"lower", c.bounds.lower}, {"upper", c.bounds.upper}};
  } else {
    shape["bounds"] = c.bounds_preset;
  }
  if (c.initial_shape) shape["initial"] = shape_json(*c.initial_shape);
  j["shape"] = shape;
  const auto& n = c.network;
  j["network"] = {{"n_freq", n.n_freq},
                  {"freq_scale", n.freq_scale},
                  {"hidden", n.hidden},
                  {"seed", n.seed},
                  {"pretrain_iters", n.pretrain.max_iters},
                  {"pretrain_tol", n.pretrain.tol},
                  {"pretrain_lr", n.pretrain.lr}};
  if (!n.weights_file.empty()) j["network"]["weights_file"] = n.weights_file;
  const auto& o = c.optimizer;
  std::vector<double> lstar(c.library.size());
  for (std::size_t i = 0; i < lstar.size(); ++i) lstar[i] = o.lambda_star_for(static_cast<int>(i));
  j["optimizer"] = {{"lr", o.lr},         {"grad_clip_norm", o.grad_clip_norm},
                    {"max_iters", o.max_iters},   {"loss_tol", o.loss_tol},
                    {"xi_init", o.xi_init},       {"xi_step", o.xi_step},
                    {"xi_final", o.xi_final},     {"lambda_star", lstar},
                    {"alpha", o.alpha},           {"tau0", o.tau0},
                    {"nu", o.nu},                 {"mask_grayness", o.mask_grayness}};
  const auto& t = c.target;
  switch (t.source) {
    case TargetConfig::Source::None: break;
    case TargetConfig::Source::File: j["target"] = {{"file", t.file}}; break;
    case TargetConfig::Source::Inline: j["target"] = {{"mdot", t.mdot}}; break;
    case TargetConfig::Source::Self: j["target"] = {{"self", true}}; break;
    case TargetConfig::Source::Reference: {
      json ref = json::object();
      if (t.reference_shape) ref["shape"] = shape_json(*t.reference_shape);
      if (t.reference_rate) ref["rate"] = *t.reference_rate;
      j["target"] = {{"reference", ref}};
      break;
    }
  }
  j["output"] = {{"dir", c.output.dir},
                 {"field_stride", c.output.field_stride},
                 {"gradcheck_coords", c.output.gradcheck_coords},
                 {"gradcheck_step", c.output.gradcheck_step},
                 {"gradcheck_tol", c.output.gradcheck_tol},
                 {"dump_adjoint_norms", c.output.dump_adjoint_norms}};
  return j.dump(2) + "\n";
}

TargetProfile load_target(const std::string& path, double dt, int n_steps) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open target file " + path);
  std::string line;
  int row = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++row;
    if (line.rfind('#', 0) != 0) {
      have_header = true;
      break;
    }
  }
  if (!have_header) throw ConfigError("target file " + path + " is empty");
  line.erase(std::remove_if(line.begin(), line.end(), ::isspace), line.end());
  if (line.rfind("t,mdot", 0) != 0) {
    throw ConfigError("target file " + path + ": header must start with 't,mdot'");
  }
  std::vector<double> ts;
  std::vector<double> ms;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string a;
    std::string b;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',')) {
      throw ConfigError("target file " + path + " row " + std::to_string(row) + ": expected t,mdot");
    }
    try {
      ts.push_back(std::stod(a));
      ms.push_back(std::stod(b));
    } catch (const std::exception&) {
      throw ConfigError("target file " + path + " row " + std::to_string(row) + ": not a number");
    }
  }
  if (ts.empty()) throw ConfigError("target file " + path + " has no samples");
  for (std::size_t i = 1; i < ts.size(); ++i) {
    if (!(ts[i] > ts[i - 1])) {
      throw ConfigError("target file " + path + ": t must be strictly increasing");
    }
  }
  TargetProfile out;
  out.mdot.resize(n_steps);
  bool same = static_cast<int>(ts.size()) == n_steps;
  for (int n = 0; same && n < n_steps; ++n) {
    same = std::abs(ts[n] - (n + 1) * dt) <= 1e-9 * (n + 1) * dt;
  }
  if (same) {
    for (int n = 0; n < n_steps; ++n) out.mdot[n] = ms[n];
    return out;
  }
  // Linear interpolation, held constant beyond the ends.
  for (int n = 0; n < n_steps; ++n) {
    const double t = (n + 1) * dt;
    if (t <= ts.front()) {
      out.mdot[n] = ms.front();
    } else if (t >= ts.back()) {
      out.mdot[n] = ms.back();
    } else {
      const auto it = std::upper_bound(ts.begin(), ts.end(), t);
      const std::size_t i = static_cast<std::size_t>(it - ts.begin());
      const double w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
      out.mdot[n] = (1.0 - w) * ms[i - 1] + w * ms[i];
    }
  }
  out.resampled = true;
  spdlog::warn("target {} has {} samples on a different grid; resampled linearly to {} steps of dt={}",
               path, ts.size(), n_steps, dt);
  return out;
}

}  // namespace pilltop

#include "diffsrl/config.hpp"

#include <fstream>
#include <sstream>

namespace diffsrl::cfg {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Ini Ini::parse(const std::string& text) {
  Ini ini;
  ini.hash_ = fnv1a(text);
  std::istringstream in(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', format("config: bad section at line %zu", lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    require(eq != std::string::npos,
            format("config: expected key=value at line %zu", lineno));
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    require(!key.empty(), format("config: empty key at line %zu", lineno));
    ini.data_[section][key] = val;
  }
  return ini;
}

Ini Ini::from_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

bool Ini::has(const std::string& section, const std::string& key) const {
  auto s = data_.find(section);
  return s != data_.end() && s->second.count(key) > 0;
}

std::string Ini::get(const std::string& section, const std::string& key,
                     const std::string& fallback) const {
  auto s = data_.find(section);
  if (s == data_.end()) return fallback;
  auto k = s->second.find(key);
  return k == s->second.end() ? fallback : k->second;
}

std::string Ini::get_required(const std::string& section, const std::string& key) const {
  require(has(section, key), "config: missing [" + section + "] " + key);
  return data_.at(section).at(key);
}

double Ini::get_double(const std::string& section, const std::string& key,
                       double fallback) const {
  if (!has(section, key)) return fallback;
  return std::stod(get_required(section, key));
}

long Ini::get_int(const std::string& section, const std::string& key,
                  long fallback) const {
  if (!has(section, key)) return fallback;
  return std::stol(get_required(section, key));
}

bool Ini::get_bool(const std::string& section, const std::string& key,
                   bool fallback) const {
  if (!has(section, key)) return fallback;
  std::string v = get_required(section, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("config: bad boolean for [" + section + "] " + key + ": " + v);
}

Vec3<double> Ini::get_vec3(const std::string& section, const std::string& key,
                           Vec3<double> fallback) const {
  if (!has(section, key)) return fallback;
  std::istringstream ss(get_required(section, key));
  Vec3<double> v;
  ss >> v.x >> v.y >> v.z;
  require(!ss.fail(), "config: expected three numbers for [" + section + "] " + key);
  return v;
}

void Ini::set(const std::string& section, const std::string& key,
              const std::string& value) {
  data_[section][key] = value;
  hash_ = fnv1a(value, hash_);
}

std::vector<std::string> Ini::sections_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : data_)
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  return out;
}

sim::SceneConfig<double> scene_from_ini(const Ini& ini) {
  sim::SceneConfig<double> s;
  s.grid_res = int(ini.get_int("grid", "resolution", 32));
  s.dt = ini.get_double("grid", "dt", 2e-4);
  s.substeps = int(ini.get_int("grid", "substeps", 20));
  s.boundary_cells = int(ini.get_int("grid", "boundary_cells", 3));
  s.sticky_boundary = ini.get_bool("grid", "sticky", true);
  s.cfl = ini.get_double("grid", "cfl", 0.5);

  s.material.youngs_modulus = ini.get_double("material", "youngs_modulus", 5e3);
  s.material.poisson_ratio = ini.get_double("material", "poisson_ratio", 0.2);
  s.material.yield_stress = ini.get_double("material", "yield_stress", 50.0);
  s.material.density = ini.get_double("material", "density", 1.0);
  s.material.friction = ini.get_double("material", "friction", 0.9);

  s.gravity = ini.get_vec3("sim", "gravity", {0, -9.8, 0});
  s.action_max = ini.get_double("sim", "action_max", 1.0);
  s.deterministic = ini.get_bool("sim", "deterministic", true);

  std::string kind = ini.get("particles", "kind", "blob");
  if (kind == "blob") s.sampler.kind = sim::SamplerKind::Blob;
  else if (kind == "rope") s.sampler.kind = sim::SamplerKind::Rope;
  else fail("config: unknown particle kind " + kind);
  s.sampler.center = ini.get_vec3("particles", "center", {0.5, 0.2, 0.5});
  s.sampler.half_extents =
      ini.get_vec3("particles", "half_extents", {0.08, 0.08, 0.08});
  s.sampler.count = size_t(ini.get_int("particles", "count", 512));
  s.sampler.seed = uint64_t(ini.get_int("particles", "seed", 1));

  s.target_offset = ini.get_vec3("task", "target_offset", {0.15, 0, 0});

  for (const std::string& sec : ini.sections_with_prefix("primitive")) {
    geom::RigidPrimitive<double> p;
    std::string shape = ini.get_required(sec, "shape");
    if (shape == "sphere") {
      p.kind = geom::ShapeKind::Sphere;
      p.radius = ini.get_double(sec, "radius", 0.05);
    } else if (shape == "capsule") {
      p.kind = geom::ShapeKind::Capsule;
      p.radius = ini.get_double(sec, "radius", 0.04);
      p.half_length = ini.get_double(sec, "half_length", 0.08);
    } else if (shape == "box") {
      p.kind = geom::ShapeKind::Box;
      p.half_extents = ini.get_vec3(sec, "half_extents", {0.05, 0.05, 0.05});
    } else {
      fail("config: unknown primitive shape " + shape);
    }
    p.trans = ini.get_vec3(sec, "position", {0.5, 0.5, 0.5});
    if (ini.has(sec, "axis_angle")) {
      std::istringstream ss(ini.get_required(sec, "axis_angle"));
      Vec3<double> axis;
      double angle;
      ss >> axis.x >> axis.y >> axis.z >> angle;
      require(!ss.fail(), "config: axis_angle expects four numbers");
      axis = axis.normalized();
      Mat3<double> K = Mat3<double>::skew(axis);
      p.rot = Mat3<double>::identity() + K * std::sin(angle) +
              K * K * (1 - std::cos(angle));
    }
    p.velocity = ini.get_vec3(sec, "velocity", {0, 0, 0});
    p.friction = ini.get_double(sec, "friction", s.material.friction);
    p.actuated = ini.get_bool(sec, "actuated", false);
    p.validate();
    s.primitives.push_back(p);
  }
  s.validate();
  return s;
}

TrainSettings train_from_ini(const Ini& ini) {
  TrainSettings t;
  t.k = int(ini.get_int("train", "k", t.k));
  t.gamma = ini.get_double("train", "gamma", t.gamma);
  t.beta0 = ini.get_double("train", "beta0", t.beta0);
  t.lambda = ini.get_double("train", "lambda", t.lambda);
  t.lr = ini.get_double("train", "lr", t.lr);
  t.epochs = int(ini.get_int("train", "epochs", t.epochs));
  t.batch = int(ini.get_int("train", "batch", t.batch));
  t.seed = uint64_t(ini.get_int("train", "seed", long(t.seed)));
  t.precision = ini.get("train", "precision", t.precision);
  t.d_latent = int(ini.get_int("train", "d_latent", t.d_latent));
  t.emd_iters = int(ini.get_int("train", "emd_iters", t.emd_iters));
  t.clip_norm = ini.get_double("train", "clip_norm", t.clip_norm);
  t.ablate_penetration =
      ini.get_bool("train", "ablate_penetration", t.ablate_penetration);
  t.beta_starts_at_one = ini.get_bool("train", "beta_one", t.beta_starts_at_one);
  t.val_samples = int(ini.get_int("train", "val_samples", t.val_samples));
  return t;
}

GenSettings gen_from_ini(const Ini& ini) {
  GenSettings g;
  g.n_traj = size_t(ini.get_int("data", "trajectories", long(g.n_traj)));
  g.length = size_t(ini.get_int("data", "length", long(g.length)));
  g.random_fraction = ini.get_double("data", "random_fraction", g.random_fraction);
  g.seed = uint64_t(ini.get_int("data", "seed", long(g.seed)));
  g.opt_iters = int(ini.get_int("data", "opt_iters", g.opt_iters));
  g.opt_lr = ini.get_double("data", "opt_lr", g.opt_lr);
  return g;
}

MbpoSettings mbpo_from_ini(const Ini& ini) {
  MbpoSettings m;
  m.epochs = int(ini.get_int("mbpo", "epochs", m.epochs));
  m.horizon = int(ini.get_int("mbpo", "horizon", m.horizon));
  m.seed = uint64_t(ini.get_int("mbpo", "seed", long(m.seed)));
  m.lr = ini.get_double("mbpo", "lr", m.lr);
  m.repeats = int(ini.get_int("mbpo", "repeats", m.repeats));
  m.track_points = size_t(ini.get_int("mbpo", "track_points", long(m.track_points)));
  return m;
}

}  // namespace diffsrl::cfg

#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffsrl/mpm.hpp"

namespace diffsrl::cfg {

// Sectioned key=value text config. '#' and ';' start comments; keys outside
// any [section] land in the "" section.
class Ini {
 public:
  static Ini parse(const std::string& text);
  static Ini from_file(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  std::string get_required(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key,
                    double fallback) const;
  long get_int(const std::string& section, const std::string& key,
               long fallback) const;
  bool get_bool(const std::string& section, const std::string& key,
                bool fallback) const;
  Vec3<double> get_vec3(const std::string& section, const std::string& key,
                        Vec3<double> fallback) const;
  void set(const std::string& section, const std::string& key,
           const std::string& value);
  std::vector<std::string> sections_with_prefix(const std::string& prefix) const;

  uint64_t content_hash() const { return hash_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> data_;
  uint64_t hash_ = 0;
};

// Scene configs are parsed in double precision; cast to the simulation
// precision at use.
sim::SceneConfig<double> scene_from_ini(const Ini& ini);

struct TrainSettings {
  int k = 7;
  double gamma = 0.99;
  double beta0 = 0.99;
  double lambda = 0.9;
  double lr = 1e-5;
  int epochs = 20;
  int batch = 4;
  uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  int d_latent = 256;
  int emd_iters = 3000;
  double clip_norm = 1.0;
  bool ablate_penetration = false;
  bool beta_starts_at_one = false;  // overrides beta0 with 1.0
  int val_samples = 8;

  void validate(size_t traj_length) const {
    require(gamma > 0 && gamma <= 1, "train: gamma must be in (0, 1]");
    require(beta0 >= 0 && beta0 <= 1, "train: beta0 must be in [0, 1]");
    require(lambda > 0 && lambda <= 1, "train: lambda must be in (0, 1]");
    require(k >= 1 && size_t(k) + 1 <= traj_length,
            format("train: k=%d must be in [1, L-1=%zu]", k, traj_length - 1));
    require(epochs >= 1, "train: epochs must be >= 1");
    require(batch >= 1, "train: batch must be >= 1");
    require(precision == "f32" || precision == "f64",
            "train: precision must be f32 or f64");
  }
};

TrainSettings train_from_ini(const Ini& ini);

struct GenSettings {
  size_t n_traj = 200;
  size_t length = 8;
  double random_fraction = 0.3;
  uint64_t seed = 1;
  int opt_iters = 8;
  double opt_lr = 0.3;
};

GenSettings gen_from_ini(const Ini& ini);

struct MbpoSettings {
  int epochs = 200;
  int horizon = 12;
  uint64_t seed = 1;
  double lr = 3e-3;
  int repeats = 5;
  size_t track_points = 0;  // > 0: down-sampling baseline features
};

MbpoSettings mbpo_from_ini(const Ini& ini);

}  // namespace diffsrl::cfg

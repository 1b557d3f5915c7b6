#pragma once

#include <string>
#include <vector>

#include "diffsrl/metrics.hpp"
#include "diffsrl/tape.hpp"

namespace diffsrl::nn {

template <class Real>
struct Tensor {
  std::string name;
  size_t rows = 0, cols = 0;
  std::vector<Real> data;
};

// Named parameter tensors in declared order; the declaration order is the
// checkpoint blob order.
template <class Real>
struct ParamSet {
  std::vector<Tensor<Real>> tensors;

  size_t add(const std::string& name, size_t rows, size_t cols) {
    tensors.push_back({name, rows, cols, std::vector<Real>(rows * cols, Real(0))});
    return tensors.size() - 1;
  }
  size_t index_of(const std::string& name) const {
    for (size_t i = 0; i < tensors.size(); i++)
      if (tensors[i].name == name) return i;
    fail("params: no tensor named " + name);
  }
  Tensor<Real>& operator[](size_t i) { return tensors[i]; }
  const Tensor<Real>& operator[](size_t i) const { return tensors[i]; }
  bool has_prefix(const std::string& prefix) const {
    for (const auto& t : tensors)
      if (t.name.rfind(prefix, 0) == 0) return true;
    return false;
  }
  size_t total_size() const {
    size_t n = 0;
    for (const auto& t : tensors) n += t.data.size();
    return n;
  }
  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors) {
      out.add(t.name, t.rows, t.cols);
      auto& d = out.tensors.back().data;
      for (size_t i = 0; i < t.data.size(); i++) d[i] = U(t.data[i]);
    }
    return out;
  }
};

// Binds every tensor as a tape leaf (trainable) or constant (frozen), in
// declared order; returned ids align with ParamSet::tensors.
template <class Real>
std::vector<ad::VarId> bind_params(ad::Tape<Real>& t, const ParamSet<Real>& p,
                                   bool trainable) {
  std::vector<ad::VarId> ids;
  ids.reserve(p.tensors.size());
  for (const auto& tensor : p.tensors)
    ids.push_back(trainable ? t.leaf(tensor.data, tensor.rows, tensor.cols)
                            : t.constant(tensor.data, tensor.rows, tensor.cols));
  return ids;
}

// Architecture dimensions shared by all components of one model.
struct ModelDims {
  int d_latent = 256;
  int n_dec = 512;      // decoder output cardinality
  int action_dim = 3;
  int manip_feat = 3;   // actuated translations concatenated
};

// All learnable components of one run. Components are optional; presence is
// keyed off tensor name prefixes (enc., dec., rew., fwd., inv., pol.).
template <class Real>
struct ModelBundle {
  ModelDims dims;
  ParamSet<Real> params;

  bool has_encoder() const { return params.has_prefix("enc."); }
  bool has_decoder() const { return params.has_prefix("dec."); }
  bool has_reward_head() const { return params.has_prefix("rew."); }
  bool has_forward_model() const { return params.has_prefix("fwd."); }
  bool has_inverse_model() const { return params.has_prefix("inv."); }
  bool has_policy() const { return params.has_prefix("pol."); }

  template <class U>
  ModelBundle<U> cast() const {
    ModelBundle<U> out;
    out.dims = dims;
    out.params = params.template cast<U>();
    return out;
  }
};

// Component constructors append initialized tensors to the bundle.
template <class Real>
void add_encoder(ModelBundle<Real>& m, uint64_t seed);
template <class Real>
void add_decoder(ModelBundle<Real>& m, uint64_t seed);
template <class Real>
void add_reward_head(ModelBundle<Real>& m, uint64_t seed);
template <class Real>
void add_forward_model(ModelBundle<Real>& m, uint64_t seed);
template <class Real>
void add_inverse_model(ModelBundle<Real>& m, uint64_t seed);
template <class Real>
void add_policy(ModelBundle<Real>& m, uint64_t seed);

// Tape builders. `ids` comes from bind_params on the bundle's ParamSet.
// encoder: points (n x 3) -> latent (1 x d_latent); permutation invariant and
// point-count agnostic (per-point shared MLP 3-128-256, max-pool, concat,
// shared 512-512, max-pool, linear).
template <class Real>
ad::VarId build_encoder(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                        const std::vector<ad::VarId>& ids, ad::VarId points);
// decoder: latent -> point cloud (n_dec x 3).
template <class Real>
ad::VarId build_decoder(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                        const std::vector<ad::VarId>& ids, ad::VarId latent);
template <class Real>
ad::VarId build_reward_head(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                            const std::vector<ad::VarId>& ids, ad::VarId latent);
// forward model: (latent ++ action) -> latent.
template <class Real>
ad::VarId build_forward_model(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                              const std::vector<ad::VarId>& ids, ad::VarId latent,
                              ad::VarId action);
// inverse model: (latent_t ++ latent_t1) -> action.
template <class Real>
ad::VarId build_inverse_model(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                              const std::vector<ad::VarId>& ids, ad::VarId latent_t,
                              ad::VarId latent_t1);
// policy: (latent ++ manip ++ target_latent) -> action in [-a_max, a_max].
template <class Real>
ad::VarId build_policy(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                       const std::vector<ad::VarId>& ids, ad::VarId latent,
                       ad::VarId manip, ad::VarId target_latent, Real a_max);

// Standalone forwards (fresh constant-bound tape under the hood).
template <class Real>
std::vector<Real> encode(const ModelBundle<Real>& m, const metrics::PointCloud<Real>& obs);
template <class Real>
metrics::PointCloud<Real> decode(const ModelBundle<Real>& m, const std::vector<Real>& latent);
template <class Real>
Real reward_head(const ModelBundle<Real>& m, const std::vector<Real>& latent);
template <class Real>
std::vector<Real> forward_model(const ModelBundle<Real>& m, const std::vector<Real>& latent,
                                const std::vector<Real>& action);
template <class Real>
std::vector<Real> inverse_model(const ModelBundle<Real>& m, const std::vector<Real>& latent_t,
                                const std::vector<Real>& latent_t1);
template <class Real>
std::vector<Real> policy_act(const ModelBundle<Real>& m, const std::vector<Real>& latent,
                             const std::vector<Real>& manip,
                             const std::vector<Real>& target_latent, Real a_max);

// Checkpoint: text header (architecture, shapes, endianness tag) followed by
// raw little-endian float32 blobs in declared order.
template <class Real>
void save_bundle(const std::string& path, const ModelBundle<Real>& m);
template <class Real>
ModelBundle<Real> load_bundle(const std::string& path);

extern template void add_encoder(ModelBundle<float>&, uint64_t);
extern template void add_encoder(ModelBundle<double>&, uint64_t);
extern template void add_decoder(ModelBundle<float>&, uint64_t);
extern template void add_decoder(ModelBundle<double>&, uint64_t);
extern template void add_reward_head(ModelBundle<float>&, uint64_t);
extern template void add_reward_head(ModelBundle<double>&, uint64_t);
extern template void add_forward_model(ModelBundle<float>&, uint64_t);
extern template void add_forward_model(ModelBundle<double>&, uint64_t);
extern template void add_inverse_model(ModelBundle<float>&, uint64_t);
extern template void add_inverse_model(ModelBundle<double>&, uint64_t);
extern template void add_policy(ModelBundle<float>&, uint64_t);
extern template void add_policy(ModelBundle<double>&, uint64_t);
extern template ad::VarId build_encoder(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_encoder(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_decoder(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_decoder(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_reward_head(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_reward_head(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
extern template ad::VarId build_forward_model(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
extern template ad::VarId build_forward_model(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
extern template ad::VarId build_inverse_model(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
extern template ad::VarId build_inverse_model(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
extern template ad::VarId build_policy(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId, ad::VarId, float);
extern template ad::VarId build_policy(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId, ad::VarId, double);
extern template std::vector<float> encode(const ModelBundle<float>&, const metrics::PointCloud<float>&);
extern template std::vector<double> encode(const ModelBundle<double>&, const metrics::PointCloud<double>&);
extern template metrics::PointCloud<float> decode(const ModelBundle<float>&, const std::vector<float>&);
extern template metrics::PointCloud<double> decode(const ModelBundle<double>&, const std::vector<double>&);
extern template float reward_head(const ModelBundle<float>&, const std::vector<float>&);
extern template double reward_head(const ModelBundle<double>&, const std::vector<double>&);
extern template std::vector<float> forward_model(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&);
extern template std::vector<double> forward_model(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&);
extern template std::vector<float> inverse_model(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&);
extern template std::vector<double> inverse_model(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&);
extern template std::vector<float> policy_act(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&, const std::vector<float>&, float);
extern template std::vector<double> policy_act(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&, const std::vector<double>&, double);
extern template void save_bundle(const std::string&, const ModelBundle<float>&);
extern template void save_bundle(const std::string&, const ModelBundle<double>&);
extern template ModelBundle<float> load_bundle(const std::string&);
extern template ModelBundle<double> load_bundle(const std::string&);

}  // namespace diffsrl::nn

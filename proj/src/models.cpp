#include "diffsrl/models.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace diffsrl::nn {

namespace {

// Kaiming-style uniform fan-in init; biases zero.
template <class Real>
void init_linear(ParamSet<Real>& p, const std::string& prefix, size_t din,
                 size_t dout, Pcg32& rng) {
  size_t wi = p.add(prefix + ".W", din, dout);
  p.add(prefix + ".b", 1, dout);
  double bound = std::sqrt(6.0 / double(din));
  for (auto& v : p[wi].data) v = Real(rng.uniform(-bound, bound));
}

template <class Real>
ad::VarId dense(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                const std::vector<ad::VarId>& ids, const std::string& prefix,
                ad::VarId x) {
  return ad::linear(t, x, ids[m.params.index_of(prefix + ".W")],
                    ids[m.params.index_of(prefix + ".b")]);
}

}  // namespace

template <class Real>
void add_encoder(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 101);
  init_linear(m.params, "enc.l1", 3, 128, rng);
  init_linear(m.params, "enc.l2", 128, 256, rng);
  init_linear(m.params, "enc.l3", 512, 512, rng);
  init_linear(m.params, "enc.out", 512, size_t(m.dims.d_latent), rng);
}

template <class Real>
void add_decoder(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 103);
  init_linear(m.params, "dec.l1", size_t(m.dims.d_latent), 1024, rng);
  init_linear(m.params, "dec.l2", 1024, 1024, rng);
  init_linear(m.params, "dec.out", 1024, size_t(3 * m.dims.n_dec), rng);
  // Small output-layer init: the first decodes stay near the output bias
  // instead of saturating the domain clamp.
  auto& w = m.params[m.params.index_of("dec.out.W")];
  for (auto& v : w.data) v *= Real(0.05);
  // Decoded points start at the domain center rather than the origin corner.
  auto& b = m.params[m.params.index_of("dec.out.b")];
  for (auto& v : b.data) v = Real(0.5);
}

template <class Real>
void add_reward_head(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 107);
  init_linear(m.params, "rew.l1", size_t(m.dims.d_latent), 256, rng);
  init_linear(m.params, "rew.l2", 256, 256, rng);
  init_linear(m.params, "rew.out", 256, 1, rng);
}

template <class Real>
void add_forward_model(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 109);
  init_linear(m.params, "fwd.l1", size_t(m.dims.d_latent + m.dims.action_dim), 256, rng);
  init_linear(m.params, "fwd.l2", 256, 256, rng);
  init_linear(m.params, "fwd.out", 256, size_t(m.dims.d_latent), rng);
}

template <class Real>
void add_inverse_model(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 113);
  init_linear(m.params, "inv.l1", size_t(2 * m.dims.d_latent), 256, rng);
  init_linear(m.params, "inv.l2", 256, 256, rng);
  init_linear(m.params, "inv.out", 256, size_t(m.dims.action_dim), rng);
}

template <class Real>
void add_policy(ModelBundle<Real>& m, uint64_t seed) {
  Pcg32 rng(seed, 127);
  size_t in = size_t(2 * m.dims.d_latent + m.dims.manip_feat);
  init_linear(m.params, "pol.l1", in, 256, rng);
  init_linear(m.params, "pol.l2", 256, 256, rng);
  init_linear(m.params, "pol.out", 256, size_t(m.dims.action_dim), rng);
}

template <class Real>
ad::VarId build_encoder(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                        const std::vector<ad::VarId>& ids, ad::VarId points) {
  require(t.rows(points) >= 1, "encoder: empty point cloud");
  require(t.cols(points) == 3, "encoder: points must be n x 3");
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "enc.l1", points));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "enc.l2", h1));
  ad::VarId g = ad::max_pool_rows(t, h2);
  ad::VarId cat = ad::concat_broadcast(t, h2, g);
  ad::VarId h3 = ad::relu(t, dense(t, m, ids, "enc.l3", cat));
  ad::VarId g2 = ad::max_pool_rows(t, h3);
  return dense(t, m, ids, "enc.out", g2);
}

namespace {

// 1 x 3n -> n x 3 view (copy).
template <class Real>
struct ReshapePointsNode final : ad::Node<Real> {
  const char* name() const override { return "reshape_points"; }
  void forward(ad::Tape<Real>& t) override {
    t.val(this->outs[0]) = t.val(this->ins[0]);
  }
  void backward(ad::Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < dY.size(); i++) dX[i] += dY[i];
  }
};

}  // namespace

template <class Real>
ad::VarId build_decoder(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                        const std::vector<ad::VarId>& ids, ad::VarId latent) {
  require(t.val(latent).size() == size_t(m.dims.d_latent),
          "decoder: latent dimension mismatch");
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "dec.l1", latent));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "dec.l2", h1));
  ad::VarId flat = dense(t, m, ids, "dec.out", h2);
  auto node = std::make_unique<ReshapePointsNode<Real>>();
  node->ins = {flat};
  node->outs = {t.alloc(size_t(m.dims.n_dec), 3)};
  return t.record(std::move(node));
}

template <class Real>
ad::VarId build_reward_head(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                            const std::vector<ad::VarId>& ids, ad::VarId latent) {
  require(t.val(latent).size() == size_t(m.dims.d_latent),
          "reward head: latent dimension mismatch");
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "rew.l1", latent));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "rew.l2", h1));
  return dense(t, m, ids, "rew.out", h2);
}

template <class Real>
ad::VarId build_forward_model(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                              const std::vector<ad::VarId>& ids, ad::VarId latent,
                              ad::VarId action) {
  require(t.val(action).size() == size_t(m.dims.action_dim),
          "forward model: action dimension mismatch");
  ad::VarId in = ad::concat_vec(t, latent, action);
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "fwd.l1", in));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "fwd.l2", h1));
  return dense(t, m, ids, "fwd.out", h2);
}

template <class Real>
ad::VarId build_inverse_model(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                              const std::vector<ad::VarId>& ids, ad::VarId latent_t,
                              ad::VarId latent_t1) {
  ad::VarId in = ad::concat_vec(t, latent_t, latent_t1);
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "inv.l1", in));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "inv.l2", h1));
  return dense(t, m, ids, "inv.out", h2);
}

template <class Real>
ad::VarId build_policy(ad::Tape<Real>& t, const ModelBundle<Real>& m,
                       const std::vector<ad::VarId>& ids, ad::VarId latent,
                       ad::VarId manip, ad::VarId target_latent, Real a_max) {
  ad::VarId in = ad::concat_vec(t, ad::concat_vec(t, latent, manip), target_latent);
  require(t.val(in).size() == size_t(2 * m.dims.d_latent + m.dims.manip_feat),
          "policy: feature dimension mismatch");
  ad::VarId h1 = ad::relu(t, dense(t, m, ids, "pol.l1", in));
  ad::VarId h2 = ad::relu(t, dense(t, m, ids, "pol.l2", h1));
  ad::VarId raw = dense(t, m, ids, "pol.out", h2);
  return ad::scale(t, ad::tanh_op(t, raw), a_max);
}

// ---------------------------------------------------------------------------
// Standalone forwards
// ---------------------------------------------------------------------------

template <class Real>
std::vector<Real> encode(const ModelBundle<Real>& m, const metrics::PointCloud<Real>& obs) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId pts = t.constant(metrics::flat_from_cloud(obs), obs.size(), 3);
  return t.val(build_encoder(t, m, ids, pts));
}

template <class Real>
metrics::PointCloud<Real> decode(const ModelBundle<Real>& m, const std::vector<Real>& latent) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId l = t.constant(latent, 1, latent.size());
  return metrics::cloud_from_flat(t.val(build_decoder(t, m, ids, l)));
}

template <class Real>
Real reward_head(const ModelBundle<Real>& m, const std::vector<Real>& latent) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId l = t.constant(latent, 1, latent.size());
  return t.scalar(build_reward_head(t, m, ids, l));
}

template <class Real>
std::vector<Real> forward_model(const ModelBundle<Real>& m, const std::vector<Real>& latent,
                                const std::vector<Real>& action) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId l = t.constant(latent, 1, latent.size());
  ad::VarId a = t.constant(action, 1, action.size());
  return t.val(build_forward_model(t, m, ids, l, a));
}

template <class Real>
std::vector<Real> inverse_model(const ModelBundle<Real>& m, const std::vector<Real>& latent_t,
                                const std::vector<Real>& latent_t1) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId l0 = t.constant(latent_t, 1, latent_t.size());
  ad::VarId l1 = t.constant(latent_t1, 1, latent_t1.size());
  return t.val(build_inverse_model(t, m, ids, l0, l1));
}

template <class Real>
std::vector<Real> policy_act(const ModelBundle<Real>& m, const std::vector<Real>& latent,
                             const std::vector<Real>& manip,
                             const std::vector<Real>& target_latent, Real a_max) {
  ad::Tape<Real> t;
  auto ids = bind_params(t, m.params, false);
  ad::VarId l = t.constant(latent, 1, latent.size());
  ad::VarId mm = t.constant(manip, 1, manip.size());
  ad::VarId tl = t.constant(target_latent, 1, target_latent.size());
  return t.val(build_policy(t, m, ids, l, mm, tl, a_max));
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

template <class Real>
void save_bundle(const std::string& path, const ModelBundle<Real>& m) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "checkpoint: cannot open " + path + " for writing");
  f << "DIFFSRL-CKPT v1\n";
  f << "endian little\n";
  f << "dtype f32\n";
  f << "dims d_latent=" << m.dims.d_latent << " n_dec=" << m.dims.n_dec
    << " action_dim=" << m.dims.action_dim << " manip_feat=" << m.dims.manip_feat
    << "\n";
  for (const auto& t : m.params.tensors)
    f << "tensor " << t.name << " " << t.rows << " " << t.cols << "\n";
  f << "blob\n";
  for (const auto& t : m.params.tensors) {
    std::vector<float> buf(t.data.size());
    for (size_t i = 0; i < buf.size(); i++) buf[i] = float(t.data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
  }
  require(f.good(), "checkpoint: write failed for " + path);
}

template <class Real>
ModelBundle<Real> load_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "checkpoint: cannot open " + path);
  std::string line;
  std::getline(f, line);
  require(line == "DIFFSRL-CKPT v1", "checkpoint: bad magic in " + path);
  ModelBundle<Real> m;
  std::vector<std::array<size_t, 2>> shapes;
  std::vector<std::string> names;
  while (std::getline(f, line)) {
    if (line == "blob") break;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "endian") {
      std::string e;
      ss >> e;
      require(e == "little", "checkpoint: unsupported endianness");
    } else if (key == "dtype") {
      std::string d;
      ss >> d;
      require(d == "f32", "checkpoint: unsupported dtype");
    } else if (key == "dims") {
      std::string kv;
      while (ss >> kv) {
        auto eq = kv.find('=');
        require(eq != std::string::npos, "checkpoint: bad dims line");
        std::string k = kv.substr(0, eq);
        int v = std::stoi(kv.substr(eq + 1));
        if (k == "d_latent") m.dims.d_latent = v;
        else if (k == "n_dec") m.dims.n_dec = v;
        else if (k == "action_dim") m.dims.action_dim = v;
        else if (k == "manip_feat") m.dims.manip_feat = v;
        else fail("checkpoint: unknown dim " + k);
      }
    } else if (key == "tensor") {
      std::string name;
      size_t r, c;
      ss >> name >> r >> c;
      require(!ss.fail(), "checkpoint: bad tensor line");
      names.push_back(name);
      shapes.push_back({r, c});
    } else {
      fail("checkpoint: unknown header key " + key);
    }
  }
  for (size_t i = 0; i < names.size(); i++) {
    m.params.add(names[i], shapes[i][0], shapes[i][1]);
    auto& t = m.params.tensors.back();
    std::vector<float> buf(t.data.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           std::streamsize(buf.size() * sizeof(float)));
    require(f.gcount() == std::streamsize(buf.size() * sizeof(float)),
            "checkpoint: truncated blob in " + path);
    for (size_t j = 0; j < buf.size(); j++) t.data[j] = Real(buf[j]);
  }
  return m;
}

template void add_encoder(ModelBundle<float>&, uint64_t);
template void add_encoder(ModelBundle<double>&, uint64_t);
template void add_decoder(ModelBundle<float>&, uint64_t);
template void add_decoder(ModelBundle<double>&, uint64_t);
template void add_reward_head(ModelBundle<float>&, uint64_t);
template void add_reward_head(ModelBundle<double>&, uint64_t);
template void add_forward_model(ModelBundle<float>&, uint64_t);
template void add_forward_model(ModelBundle<double>&, uint64_t);
template void add_inverse_model(ModelBundle<float>&, uint64_t);
template void add_inverse_model(ModelBundle<double>&, uint64_t);
template void add_policy(ModelBundle<float>&, uint64_t);
template void add_policy(ModelBundle<double>&, uint64_t);
template ad::VarId build_encoder(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_encoder(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_decoder(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_decoder(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_reward_head(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_reward_head(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId);
template ad::VarId build_forward_model(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
template ad::VarId build_forward_model(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
template ad::VarId build_inverse_model(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
template ad::VarId build_inverse_model(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId);
template ad::VarId build_policy(ad::Tape<float>&, const ModelBundle<float>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId, ad::VarId, float);
template ad::VarId build_policy(ad::Tape<double>&, const ModelBundle<double>&, const std::vector<ad::VarId>&, ad::VarId, ad::VarId, ad::VarId, double);
template std::vector<float> encode(const ModelBundle<float>&, const metrics::PointCloud<float>&);
template std::vector<double> encode(const ModelBundle<double>&, const metrics::PointCloud<double>&);
template metrics::PointCloud<float> decode(const ModelBundle<float>&, const std::vector<float>&);
template metrics::PointCloud<double> decode(const ModelBundle<double>&, const std::vector<double>&);
template float reward_head(const ModelBundle<float>&, const std::vector<float>&);
template double reward_head(const ModelBundle<double>&, const std::vector<double>&);
template std::vector<float> forward_model(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&);
template std::vector<double> forward_model(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&);
template std::vector<float> inverse_model(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&);
template std::vector<double> inverse_model(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&);
template std::vector<float> policy_act(const ModelBundle<float>&, const std::vector<float>&, const std::vector<float>&, const std::vector<float>&, float);
template std::vector<double> policy_act(const ModelBundle<double>&, const std::vector<double>&, const std::vector<double>&, const std::vector<double>&, double);
template void save_bundle(const std::string&, const ModelBundle<float>&);
template void save_bundle(const std::string&, const ModelBundle<double>&);
template ModelBundle<float> load_bundle(const std::string&);
template ModelBundle<double> load_bundle(const std::string&);

}  // namespace diffsrl::nn

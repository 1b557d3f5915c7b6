#pragma once

#include "diffsrl/mpm.hpp"
#include "diffsrl/tape.hpp"

namespace diffsrl::sim {

// Particle state on the tape: positions/velocities as n x 3, deformation
// gradients and affine matrices as n x 9 (row-major).
struct SimStateVars {
  ad::VarId x = ad::kNoVar;
  ad::VarId v = ad::kNoVar;
  ad::VarId F = ad::kNoVar;
  ad::VarId C = ad::kNoVar;
};

template <class Real>
std::vector<Real> flatten_vec3(const std::vector<Vec3<Real>>& v) {
  std::vector<Real> out(v.size() * 3);
  for (size_t i = 0; i < v.size(); i++)
    for (int c = 0; c < 3; c++) out[i * 3 + size_t(c)] = v[i][c];
  return out;
}

template <class Real>
std::vector<Real> flatten_mat3(const std::vector<Mat3<Real>>& m) {
  std::vector<Real> out(m.size() * 9);
  for (size_t i = 0; i < m.size(); i++)
    for (int r = 0; r < 3; r++)
      for (int c = 0; c < 3; c++) out[i * 9 + size_t(r * 3 + c)] = m[i](r, c);
  return out;
}

template <class Real>
std::vector<Vec3<Real>> unflatten_vec3(const std::vector<Real>& f) {
  std::vector<Vec3<Real>> out(f.size() / 3);
  for (size_t i = 0; i < out.size(); i++)
    out[i] = {f[i * 3], f[i * 3 + 1], f[i * 3 + 2]};
  return out;
}

template <class Real>
std::vector<Mat3<Real>> unflatten_mat3(const std::vector<Real>& f) {
  std::vector<Mat3<Real>> out(f.size() / 9);
  for (size_t i = 0; i < out.size(); i++)
    for (int r = 0; r < 3; r++)
      for (int c = 0; c < 3; c++) out[i](r, c) = f[i * 9 + size_t(r * 3 + c)];
  return out;
}

// Registers the particle fields of `state` as constants (non-differentiable).
template <class Real>
SimStateVars state_constants(ad::Tape<Real>& t, const FullState<Real>& s) {
  SimStateVars v;
  v.x = t.constant(flatten_vec3(s.x), s.size(), 3);
  v.v = t.constant(flatten_vec3(s.v), s.size(), 3);
  v.F = t.constant(flatten_mat3(s.F), s.size(), 9);
  v.C = t.constant(flatten_mat3(s.C), s.size(), 9);
  return v;
}

namespace detail {

// One control step as a tape node: checkpointing is inherent (the input vars
// hold the control-step entry state; substeps are recomputed in backward).
template <class Real>
struct SimStepNode final : ad::Node<Real> {
  const MpmSim<Real>* sim = nullptr;
  std::vector<Vec3<Real>> rigid_in;
  Action<Real> action_const;  // used when no action var is attached
  bool action_is_var = false;
  Real time_in = 0;

  const char* name() const override { return "sim_step"; }

  FullState<Real> gather_input(ad::Tape<Real>& t) const {
    FullState<Real> s;
    s.x = unflatten_vec3(t.val(this->ins[0]));
    s.v = unflatten_vec3(t.val(this->ins[1]));
    s.F = unflatten_mat3(t.val(this->ins[2]));
    s.C = unflatten_mat3(t.val(this->ins[3]));
    s.rigid_trans = rigid_in;
    s.time = time_in;
    return s;
  }

  Action<Real> gather_action(ad::Tape<Real>& t) const {
    if (action_is_var) return t.val(this->ins[4]);
    return action_const;
  }

  void forward(ad::Tape<Real>& t) override {
    FullState<Real> out = sim->step(gather_input(t), gather_action(t));
    t.val(this->outs[0]) = flatten_vec3(out.x);
    t.val(this->outs[1]) = flatten_vec3(out.v);
    t.val(this->outs[2]) = flatten_mat3(out.F);
    t.val(this->outs[3]) = flatten_mat3(out.C);
  }

  void backward(ad::Tape<Real>& t) override {
    FullState<Real> in = gather_input(t);
    Action<Real> act = gather_action(t);
    size_t n = in.size();
    StateAdjoint<Real> out_adj;
    out_adj.x = unflatten_vec3(t.grad(this->outs[0]));
    out_adj.v = unflatten_vec3(t.grad(this->outs[1]));
    out_adj.F = unflatten_mat3(t.grad(this->outs[2]));
    out_adj.C = unflatten_mat3(t.grad(this->outs[3]));
    StateAdjoint<Real> in_adj = StateAdjoint<Real>::zeros(n);
    std::vector<Real> act_adj(act.size(), Real(0));
    sim->step_backward(in, act, out_adj, in_adj,
                       action_is_var ? &act_adj : nullptr);
    auto& gx = t.grad(this->ins[0]);
    auto& gv = t.grad(this->ins[1]);
    auto& gF = t.grad(this->ins[2]);
    auto& gC = t.grad(this->ins[3]);
    for (size_t p = 0; p < n; p++)
      for (int c = 0; c < 3; c++) {
        gx[p * 3 + size_t(c)] += in_adj.x[p][c];
        gv[p * 3 + size_t(c)] += in_adj.v[p][c];
      }
    for (size_t p = 0; p < n; p++)
      for (int rc = 0; rc < 9; rc++) {
        gF[p * 9 + size_t(rc)] += in_adj.F[p](rc / 3, rc % 3);
        gC[p * 9 + size_t(rc)] += in_adj.C[p](rc / 3, rc % 3);
      }
    if (action_is_var) {
      auto& ga = t.grad(this->ins[4]);
      for (size_t i = 0; i < act_adj.size(); i++) ga[i] += act_adj[i];
    }
  }
};

}  // namespace detail

// Records one control step. rigid_out receives the advanced rigid poses for
// chaining subsequent steps (kinematic, not differentiated).
template <class Real>
SimStateVars sim_step_op(ad::Tape<Real>& t, const MpmSim<Real>& sim,
                         const SimStateVars& in,
                         const std::vector<Vec3<Real>>& rigid_in, Real time_in,
                         const Action<Real>& action, ad::VarId action_var,
                         std::vector<Vec3<Real>>* rigid_out) {
  auto node = std::make_unique<detail::SimStepNode<Real>>();
  node->sim = &sim;
  node->rigid_in = rigid_in;
  node->time_in = time_in;
  node->ins = {in.x, in.v, in.F, in.C};
  if (action_var != ad::kNoVar) {
    node->action_is_var = true;
    node->ins.push_back(action_var);
  } else {
    node->action_const = action;
  }
  size_t n = t.rows(in.x);
  SimStateVars out;
  out.x = t.alloc(n, 3);
  out.v = t.alloc(n, 3);
  out.F = t.alloc(n, 9);
  out.C = t.alloc(n, 9);
  node->outs = {out.x, out.v, out.F, out.C};
  t.record(std::move(node));

  if (rigid_out) {
    // Kinematic pose advance over the control step.
    std::vector<Vec3<Real>> rvel;
    size_t k = 0;
    Action<Real> act = action;
    if (action_var != ad::kNoVar) act = t.val(action_var);
    for (const auto& prim : sim.scene().primitives) {
      if (prim.actuated) {
        Vec3<Real> a{act[k], act[k + 1], act[k + 2]};
        for (int c = 0; c < 3; c++)
          a[c] = std::clamp(a[c], -sim.scene().action_max, sim.scene().action_max);
        rvel.push_back(a);
        k += 3;
      } else {
        rvel.push_back(prim.velocity);
      }
    }
    rigid_out->resize(rigid_in.size());
    Real T = sim.scene().dt * Real(sim.scene().substeps);
    for (size_t b = 0; b < rigid_in.size(); b++)
      (*rigid_out)[b] = rigid_in[b] + rvel[b] * T;
  }
  return out;
}

// Direct (tape-free) rollout gradient: BPTT with per-output-state position
// adjoints. Zero adjoints produce exact zero gradients.
template <class Real>
struct RolloutGrad {
  std::vector<Vec3<Real>> positions;        // d loss / d initial positions
  std::vector<Action<Real>> actions;        // per-step, when requested
};

template <class Real>
RolloutGrad<Real> rollout_grad(const MpmSim<Real>& sim, const FullState<Real>& state,
                               const std::vector<Action<Real>>& actions,
                               const std::vector<std::vector<Vec3<Real>>>& pos_adjoints,
                               bool want_action_grads = false) {
  require(pos_adjoints.size() == actions.size(),
          "rollout_grad: one position adjoint per output state required");
  std::vector<FullState<Real>> traj = sim.rollout(state, actions);
  size_t n = state.size();
  size_t k = actions.size();

  StateAdjoint<Real> adj = StateAdjoint<Real>::zeros(n);
  RolloutGrad<Real> out;
  if (want_action_grads)
    out.actions.assign(k, Action<Real>(sim.scene().action_dim(), Real(0)));

  for (size_t i = k; i-- > 0;) {
    require(pos_adjoints[i].size() == n, "rollout_grad: adjoint size mismatch");
    for (size_t p = 0; p < n; p++) adj.x[p] += pos_adjoints[i][p];
    const FullState<Real>& in = (i == 0) ? state : traj[i - 1];
    StateAdjoint<Real> prev = StateAdjoint<Real>::zeros(n);
    sim.step_backward(in, actions[i], adj, prev,
                      want_action_grads ? &out.actions[i] : nullptr);
    adj = std::move(prev);
  }
  out.positions = adj.x;
  return out;
}

}  // namespace diffsrl::sim

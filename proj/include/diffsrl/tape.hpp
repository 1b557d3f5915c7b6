#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "diffsrl/common.hpp"

namespace diffsrl::ad {

using VarId = int32_t;
constexpr VarId kNoVar = -1;

// Reverse-mode tape. Nodes are coarse operations (a whole dense layer, a
// whole simulation step) with hand-written adjoints, appended in execution
// order; backward walks them in reverse. Values are computed eagerly when an
// op is recorded, so the tape is always in a replayable state.
template <class Real>
class Tape;

template <class Real>
struct Node {
  virtual ~Node() = default;
  virtual const char* name() const = 0;
  // Recompute outs from ins (values already present on first execution).
  virtual void forward(Tape<Real>& t) = 0;
  // Accumulate gradients of ins from gradients of outs.
  virtual void backward(Tape<Real>& t) = 0;

  std::vector<VarId> ins;
  std::vector<VarId> outs;
};

template <class Real>
class Tape {
 public:
  struct Var {
    std::vector<Real> val;
    std::vector<Real> grad;  // sized lazily at backward
    size_t rows = 0, cols = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarId alloc(size_t rows, size_t cols) {
    vars_.push_back(Var{});
    Var& v = vars_.back();
    v.rows = rows;
    v.cols = cols;
    v.val.assign(rows * cols, Real(0));
    return VarId(vars_.size() - 1);
  }

  // Differentiable input. Gradients are reported for leaves only.
  VarId leaf(const std::vector<Real>& values, size_t rows, size_t cols) {
    require(values.size() == rows * cols, "tape: leaf size mismatch");
    VarId id = alloc(rows, cols);
    vars_[id].val = values;
    leaves_.push_back(id);
    return id;
  }

  // Non-differentiable input.
  VarId constant(const std::vector<Real>& values, size_t rows, size_t cols) {
    require(values.size() == rows * cols, "tape: constant size mismatch");
    VarId id = alloc(rows, cols);
    vars_[id].val = values;
    return VarId(id);
  }

  VarId scalar_constant(Real v) { return constant({v}, 1, 1); }

  // Appends the node and executes it immediately.
  VarId record(std::unique_ptr<Node<Real>> node) {
    Node<Real>* n = node.get();
    nodes_.push_back(std::move(node));
    n->forward(*this);
    check_outputs_finite(*n, nodes_.size() - 1, "forward");
    return n->outs.empty() ? kNoVar : n->outs[0];
  }

  // Re-executes every recorded node in order.
  void replay() {
    for (size_t i = 0; i < nodes_.size(); i++) {
      nodes_[i]->forward(*this);
      check_outputs_finite(*nodes_[i], i, "replay");
    }
  }

  void backward(VarId out, const std::vector<Real>& seed) {
    for (Var& v : vars_) v.grad.assign(v.val.size(), Real(0));
    Var& o = vars_[out];
    require(seed.size() == o.val.size(), "tape: seed shape mismatch");
    o.grad = seed;
    for (size_t i = nodes_.size(); i-- > 0;) {
      nodes_[i]->backward(*this);
      check_input_grads_finite(*nodes_[i], i);
    }
  }

  void backward_scalar(VarId out, Real seed = Real(1)) {
    require(vars_[out].val.size() == 1, "tape: backward_scalar needs scalar output");
    backward(out, {seed});
  }

  Var& var(VarId id) { return vars_[id]; }
  const Var& var(VarId id) const { return vars_[id]; }
  std::vector<Real>& val(VarId id) { return vars_[id].val; }
  const std::vector<Real>& val(VarId id) const { return vars_[id].val; }
  std::vector<Real>& grad(VarId id) { return vars_[id].grad; }
  const std::vector<Real>& grad(VarId id) const { return vars_[id].grad; }
  Real scalar(VarId id) const {
    require(vars_[id].val.size() == 1, "tape: not a scalar");
    return vars_[id].val[0];
  }
  size_t rows(VarId id) const { return vars_[id].rows; }
  size_t cols(VarId id) const { return vars_[id].cols; }
  const std::vector<VarId>& leaves() const { return leaves_; }
  size_t num_nodes() const { return nodes_.size(); }

 private:
  void check_outputs_finite(const Node<Real>& n, size_t idx, const char* phase) {
    for (VarId o : n.outs) {
      if (!all_finite(vars_[o].val))
        fail(format("tape: non-finite value in %s at node %zu (%s)", phase, idx,
                    n.name()));
    }
  }
  void check_input_grads_finite(const Node<Real>& n, size_t idx) {
    for (VarId i : n.ins) {
      if (!all_finite(vars_[i].grad))
        fail(format("tape: non-finite gradient in backward at node %zu (%s)", idx,
                    n.name()));
    }
  }

  std::vector<Var> vars_;
  std::vector<std::unique_ptr<Node<Real>>> nodes_;
  std::vector<VarId> leaves_;
};

// ---------------------------------------------------------------------------
// Generic elementwise / dense ops shared by the neural models and the loss
// assembly. Simulation kernels register their own nodes (see mpm.hpp).
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
struct LinearNode final : Node<Real> {
  // Y[n x dout] = X[n x din] * W[din x dout] + b[dout]
  const char* name() const override { return "linear"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& W = t.val(this->ins[1]);
    const auto& b = t.val(this->ins[2]);
    auto& Y = t.val(this->outs[0]);
    size_t n = t.rows(this->ins[0]), din = t.cols(this->ins[0]),
           dout = t.cols(this->ins[1]);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < long(n); i++) {
      Real* y = &Y[size_t(i) * dout];
      const Real* x = &X[size_t(i) * din];
      for (size_t j = 0; j < dout; j++) y[j] = b[j];
      for (size_t k = 0; k < din; k++) {
        Real xk = x[k];
        const Real* w = &W[k * dout];
        for (size_t j = 0; j < dout; j++) y[j] += xk * w[j];
      }
    }
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& W = t.val(this->ins[1]);
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    auto& dW = t.grad(this->ins[1]);
    auto& db = t.grad(this->ins[2]);
    size_t n = t.rows(this->ins[0]), din = t.cols(this->ins[0]),
           dout = t.cols(this->ins[1]);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < long(n); i++) {
      Real* dx = &dX[size_t(i) * din];
      const Real* dy = &dY[size_t(i) * dout];
      for (size_t k = 0; k < din; k++) {
        const Real* w = &W[k * dout];
        Real s = 0;
        for (size_t j = 0; j < dout; j++) s += dy[j] * w[j];
        dx[k] += s;
      }
    }
#pragma omp parallel for schedule(static)
    for (long k = 0; k < long(din); k++) {
      Real* dwk = &dW[size_t(k) * dout];
      for (size_t i = 0; i < n; i++) {
        Real xk = X[i * din + size_t(k)];
        const Real* dy = &dY[i * dout];
        for (size_t j = 0; j < dout; j++) dwk[j] += xk * dy[j];
      }
    }
    for (size_t i = 0; i < n; i++) {
      const Real* dy = &dY[i * dout];
      for (size_t j = 0; j < dout; j++) db[j] += dy[j];
    }
  }
};

template <class Real>
struct ReluNode final : Node<Real> {
  const char* name() const override { return "relu"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Y[i] = X[i] > Real(0) ? X[i] : Real(0);
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < X.size(); i++)
      if (X[i] > Real(0)) dX[i] += dY[i];
  }
};

template <class Real>
struct TanhNode final : Node<Real> {
  const char* name() const override { return "tanh"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Y[i] = std::tanh(X[i]);
  }
  void backward(Tape<Real>& t) override {
    const auto& Y = t.val(this->outs[0]);
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < Y.size(); i++) dX[i] += dY[i] * (Real(1) - Y[i] * Y[i]);
  }
};

// Column-wise max over rows; ties take the lowest row index so backward is
// deterministic.
template <class Real>
struct MaxPoolRowsNode final : Node<Real> {
  std::vector<uint32_t> argmax;
  const char* name() const override { return "max_pool_rows"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    size_t n = t.rows(this->ins[0]), d = t.cols(this->ins[0]);
    argmax.assign(d, 0);
    for (size_t j = 0; j < d; j++) Y[j] = X[j];
    for (size_t i = 1; i < n; i++) {
      const Real* x = &X[i * d];
      for (size_t j = 0; j < d; j++) {
        if (x[j] > Y[j]) {
          Y[j] = x[j];
          argmax[j] = uint32_t(i);
        }
      }
    }
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    size_t d = t.cols(this->ins[0]);
    for (size_t j = 0; j < d; j++) dX[size_t(argmax[j]) * d + j] += dY[j];
  }
};

// [A | broadcast(g)] per row: A is n x d1, g is 1 x d2, result n x (d1+d2).
template <class Real>
struct ConcatBroadcastNode final : Node<Real> {
  const char* name() const override { return "concat_broadcast"; }
  void forward(Tape<Real>& t) override {
    const auto& A = t.val(this->ins[0]);
    const auto& g = t.val(this->ins[1]);
    auto& Y = t.val(this->outs[0]);
    size_t n = t.rows(this->ins[0]), d1 = t.cols(this->ins[0]),
           d2 = t.cols(this->ins[1]);
    for (size_t i = 0; i < n; i++) {
      for (size_t j = 0; j < d1; j++) Y[i * (d1 + d2) + j] = A[i * d1 + j];
      for (size_t j = 0; j < d2; j++) Y[i * (d1 + d2) + d1 + j] = g[j];
    }
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dA = t.grad(this->ins[0]);
    auto& dg = t.grad(this->ins[1]);
    size_t n = t.rows(this->ins[0]), d1 = t.cols(this->ins[0]),
           d2 = t.cols(this->ins[1]);
    for (size_t i = 0; i < n; i++) {
      for (size_t j = 0; j < d1; j++) dA[i * d1 + j] += dY[i * (d1 + d2) + j];
      for (size_t j = 0; j < d2; j++) dg[j] += dY[i * (d1 + d2) + d1 + j];
    }
  }
};

// Row-wise concatenation of two row vectors (1 x d1, 1 x d2 -> 1 x (d1+d2)).
template <class Real>
struct ConcatVecNode final : Node<Real> {
  const char* name() const override { return "concat_vec"; }
  void forward(Tape<Real>& t) override {
    const auto& a = t.val(this->ins[0]);
    const auto& b = t.val(this->ins[1]);
    auto& y = t.val(this->outs[0]);
    std::copy(a.begin(), a.end(), y.begin());
    std::copy(b.begin(), b.end(), y.begin() + a.size());
  }
  void backward(Tape<Real>& t) override {
    const auto& dy = t.grad(this->outs[0]);
    auto& da = t.grad(this->ins[0]);
    auto& db = t.grad(this->ins[1]);
    for (size_t i = 0; i < da.size(); i++) da[i] += dy[i];
    for (size_t i = 0; i < db.size(); i++) db[i] += dy[da.size() + i];
  }
};

// y = a*X + b*Y elementwise with fixed scalars.
template <class Real>
struct AxpbyNode final : Node<Real> {
  Real a, b;
  const char* name() const override { return "axpby"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& Y = t.val(this->ins[1]);
    auto& Z = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Z[i] = a * X[i] + b * Y[i];
  }
  void backward(Tape<Real>& t) override {
    const auto& dZ = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    auto& dY = t.grad(this->ins[1]);
    for (size_t i = 0; i < dZ.size(); i++) {
      dX[i] += a * dZ[i];
      dY[i] += b * dZ[i];
    }
  }
};

template <class Real>
struct ScaleNode final : Node<Real> {
  Real s;
  const char* name() const override { return "scale"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Y[i] = s * X[i];
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < dY.size(); i++) dX[i] += s * dY[i];
  }
};

template <class Real>
struct MulNode final : Node<Real> {
  const char* name() const override { return "mul"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& Y = t.val(this->ins[1]);
    auto& Z = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Z[i] = X[i] * Y[i];
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& Y = t.val(this->ins[1]);
    const auto& dZ = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    auto& dY = t.grad(this->ins[1]);
    for (size_t i = 0; i < dZ.size(); i++) {
      dX[i] += dZ[i] * Y[i];
      dY[i] += dZ[i] * X[i];
    }
  }
};

template <class Real>
struct SumNode final : Node<Real> {
  const char* name() const override { return "sum"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    Real s = 0;
    for (Real x : X) s += x;
    t.val(this->outs[0])[0] = s;
  }
  void backward(Tape<Real>& t) override {
    Real d = t.grad(this->outs[0])[0];
    auto& dX = t.grad(this->ins[0]);
    for (Real& g : dX) g += d;
  }
};

template <class Real>
struct MeanSqDiffNode final : Node<Real> {
  const char* name() const override { return "mean_sq_diff"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& Y = t.val(this->ins[1]);
    Real s = 0;
    for (size_t i = 0; i < X.size(); i++) {
      Real d = X[i] - Y[i];
      s += d * d;
    }
    t.val(this->outs[0])[0] = s / Real(X.size());
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& Y = t.val(this->ins[1]);
    Real d = t.grad(this->outs[0])[0] * Real(2) / Real(X.size());
    auto& dX = t.grad(this->ins[0]);
    auto& dY = t.grad(this->ins[1]);
    for (size_t i = 0; i < X.size(); i++) {
      dX[i] += d * (X[i] - Y[i]);
      dY[i] -= d * (X[i] - Y[i]);
    }
  }
};

// Reorders rows: out row i = in row index[i].
template <class Real>
struct GatherRowsNode final : Node<Real> {
  std::vector<uint32_t> index;
  const char* name() const override { return "gather_rows"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    size_t d = t.cols(this->ins[0]);
    for (size_t i = 0; i < index.size(); i++)
      for (size_t j = 0; j < d; j++) Y[i * d + j] = X[size_t(index[i]) * d + j];
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    size_t d = t.cols(this->ins[0]);
    for (size_t i = 0; i < index.size(); i++)
      for (size_t j = 0; j < d; j++) dX[size_t(index[i]) * d + j] += dY[i * d + j];
  }
};

// Column means over rows: n x d -> 1 x d.
template <class Real>
struct MeanRowsNode final : Node<Real> {
  const char* name() const override { return "mean_rows"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    size_t n = t.rows(this->ins[0]), d = t.cols(this->ins[0]);
    for (size_t j = 0; j < d; j++) Y[j] = 0;
    for (size_t i = 0; i < n; i++)
      for (size_t j = 0; j < d; j++) Y[j] += X[i * d + j];
    for (size_t j = 0; j < d; j++) Y[j] /= Real(n);
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    size_t n = t.rows(this->ins[0]), d = t.cols(this->ins[0]);
    for (size_t i = 0; i < n; i++)
      for (size_t j = 0; j < d; j++) dX[i * d + j] += dY[j] / Real(n);
  }
};

// Euclidean norm of a flat vector, smoothed near zero by eps.
template <class Real>
struct VecNormNode final : Node<Real> {
  Real eps = Real(1e-12);
  const char* name() const override { return "vec_norm"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    Real s = eps;
    for (Real x : X) s += x * x;
    t.val(this->outs[0])[0] = std::sqrt(s);
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    Real y = t.val(this->outs[0])[0];
    Real d = t.grad(this->outs[0])[0];
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < X.size(); i++) dX[i] += d * X[i] / y;
  }
};

// Shape-only view (copy): total size must match.
template <class Real>
struct ReshapeNode final : Node<Real> {
  const char* name() const override { return "reshape"; }
  void forward(Tape<Real>& t) override { t.val(this->outs[0]) = t.val(this->ins[0]); }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < dY.size(); i++) dX[i] += dY[i];
  }
};

template <class Real>
struct ExpNode final : Node<Real> {
  const char* name() const override { return "exp"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Y[i] = std::exp(X[i]);
  }
  void backward(Tape<Real>& t) override {
    const auto& Y = t.val(this->outs[0]);
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < Y.size(); i++) dX[i] += dY[i] * Y[i];
  }
};

// Column slice: keeps cols [begin, begin+len).
template <class Real>
struct SliceColsNode final : Node<Real> {
  size_t begin = 0, len = 0;
  const char* name() const override { return "slice_cols"; }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    size_t n = t.rows(this->ins[0]), d = t.cols(this->ins[0]);
    for (size_t i = 0; i < n; i++)
      for (size_t j = 0; j < len; j++) Y[i * len + j] = X[i * d + begin + j];
  }
  void backward(Tape<Real>& t) override {
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    size_t n = t.rows(this->ins[0]), d = t.cols(this->ins[0]);
    for (size_t i = 0; i < n; i++)
      for (size_t j = 0; j < len; j++) dX[i * d + begin + j] += dY[i * len + j];
  }
};

// Identity inside [lo+band, hi-band], exponential saturation outside; C1.
template <class Real>
struct SoftClampNode final : Node<Real> {
  Real lo, hi, band;
  const char* name() const override { return "soft_clamp"; }
  Real fwd1(Real x) const {
    Real a = lo + band, b = hi - band;
    if (x > b) return hi - band * std::exp(-(x - b) / band);
    if (x < a) return lo + band * std::exp((x - a) / band);
    return x;
  }
  Real der1(Real x) const {
    Real a = lo + band, b = hi - band;
    if (x > b) return std::exp(-(x - b) / band);
    if (x < a) return std::exp((x - a) / band);
    return Real(1);
  }
  void forward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    auto& Y = t.val(this->outs[0]);
    for (size_t i = 0; i < X.size(); i++) Y[i] = fwd1(X[i]);
  }
  void backward(Tape<Real>& t) override {
    const auto& X = t.val(this->ins[0]);
    const auto& dY = t.grad(this->outs[0]);
    auto& dX = t.grad(this->ins[0]);
    for (size_t i = 0; i < X.size(); i++) dX[i] += dY[i] * der1(X[i]);
  }
};

}  // namespace detail

// Op builders. Each records the node and returns the output var.

template <class Real>
VarId linear(Tape<Real>& t, VarId X, VarId W, VarId b) {
  require(t.cols(X) == t.rows(W), "linear: X/W shape mismatch");
  require(t.cols(W) == t.val(b).size(), "linear: W/b shape mismatch");
  auto n = std::make_unique<detail::LinearNode<Real>>();
  n->ins = {X, W, b};
  n->outs = {t.alloc(t.rows(X), t.cols(W))};
  return t.record(std::move(n));
}

template <class Real>
VarId relu(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::ReluNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId tanh_op(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::TanhNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId max_pool_rows(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::MaxPoolRowsNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(1, t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId concat_broadcast(Tape<Real>& t, VarId A, VarId g) {
  auto n = std::make_unique<detail::ConcatBroadcastNode<Real>>();
  n->ins = {A, g};
  n->outs = {t.alloc(t.rows(A), t.cols(A) + t.cols(g))};
  return t.record(std::move(n));
}

template <class Real>
VarId concat_vec(Tape<Real>& t, VarId a, VarId b) {
  auto n = std::make_unique<detail::ConcatVecNode<Real>>();
  n->ins = {a, b};
  n->outs = {t.alloc(1, t.val(a).size() + t.val(b).size())};
  return t.record(std::move(n));
}

template <class Real>
VarId axpby(Tape<Real>& t, Real a, VarId X, Real b, VarId Y) {
  require(t.val(X).size() == t.val(Y).size(), "axpby: size mismatch");
  auto n = std::make_unique<detail::AxpbyNode<Real>>();
  n->a = a;
  n->b = b;
  n->ins = {X, Y};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId scale(Tape<Real>& t, VarId X, Real s) {
  auto n = std::make_unique<detail::ScaleNode<Real>>();
  n->s = s;
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId mul(Tape<Real>& t, VarId X, VarId Y) {
  require(t.val(X).size() == t.val(Y).size(), "mul: size mismatch");
  auto n = std::make_unique<detail::MulNode<Real>>();
  n->ins = {X, Y};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId sum(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::SumNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(1, 1)};
  return t.record(std::move(n));
}

template <class Real>
VarId mean_sq_diff(Tape<Real>& t, VarId X, VarId Y) {
  require(t.val(X).size() == t.val(Y).size(), "mean_sq_diff: size mismatch");
  auto n = std::make_unique<detail::MeanSqDiffNode<Real>>();
  n->ins = {X, Y};
  n->outs = {t.alloc(1, 1)};
  return t.record(std::move(n));
}

template <class Real>
VarId gather_rows(Tape<Real>& t, VarId X, const std::vector<uint32_t>& index) {
  auto n = std::make_unique<detail::GatherRowsNode<Real>>();
  n->index = index;
  n->ins = {X};
  n->outs = {t.alloc(index.size(), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId mean_rows(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::MeanRowsNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(1, t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId vec_norm(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::VecNormNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(1, 1)};
  return t.record(std::move(n));
}

template <class Real>
VarId reshape(Tape<Real>& t, VarId X, size_t rows, size_t cols) {
  require(t.val(X).size() == rows * cols, "reshape: size mismatch");
  auto n = std::make_unique<detail::ReshapeNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(rows, cols)};
  return t.record(std::move(n));
}

template <class Real>
VarId exp_op(Tape<Real>& t, VarId X) {
  auto n = std::make_unique<detail::ExpNode<Real>>();
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

template <class Real>
VarId slice_cols(Tape<Real>& t, VarId X, size_t begin, size_t len) {
  require(begin + len <= t.cols(X), "slice_cols: out of range");
  auto n = std::make_unique<detail::SliceColsNode<Real>>();
  n->begin = begin;
  n->len = len;
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), len)};
  return t.record(std::move(n));
}

template <class Real>
VarId soft_clamp(Tape<Real>& t, VarId X, Real lo, Real hi, Real band) {
  auto n = std::make_unique<detail::SoftClampNode<Real>>();
  n->lo = lo;
  n->hi = hi;
  n->band = band;
  n->ins = {X};
  n->outs = {t.alloc(t.rows(X), t.cols(X))};
  return t.record(std::move(n));
}

// ---------------------------------------------------------------------------
// Program harness: a differentiable computation over registered leaves, used
// by evaluate_and_backward and the finite-difference gradient checker.
// ---------------------------------------------------------------------------

template <class Real>
struct Program {
  struct LeafSpec {
    std::vector<Real> values;
    size_t rows = 1, cols = 1;
  };
  std::vector<LeafSpec> leaves;
  // Builds the computation on the tape; returns the output var.
  std::function<VarId(Tape<Real>&, const std::vector<VarId>&)> build;
};

template <class Real>
struct GradBundle {
  std::vector<std::vector<Real>> grads;  // aligned with Program::leaves
};

template <class Real>
struct BuiltProgram {
  std::unique_ptr<Tape<Real>> tape;
  std::vector<VarId> leaf_ids;
  VarId output = kNoVar;
};

template <class Real>
BuiltProgram<Real> run_program(const Program<Real>& p) {
  BuiltProgram<Real> r;
  r.tape = std::make_unique<Tape<Real>>();
  for (const auto& l : p.leaves) r.leaf_ids.push_back(r.tape->leaf(l.values, l.rows, l.cols));
  r.output = p.build(*r.tape, r.leaf_ids);
  return r;
}

template <class Real>
GradBundle<Real> evaluate_and_backward(const Program<Real>& p, Real seed = Real(1)) {
  BuiltProgram<Real> bp = run_program(p);
  bp.tape->backward_scalar(bp.output, seed);
  GradBundle<Real> g;
  for (VarId id : bp.leaf_ids) g.grads.push_back(bp.tape->grad(id));
  return g;
}

template <class Real>
GradBundle<Real> evaluate_and_backward(const Program<Real>& p,
                                       const std::vector<Real>& seed) {
  BuiltProgram<Real> bp = run_program(p);
  bp.tape->backward(bp.output, seed);
  GradBundle<Real> g;
  for (VarId id : bp.leaf_ids) g.grads.push_back(bp.tape->grad(id));
  return g;
}

struct GradCheckReport {
  double max_rel_err = 0;
  size_t worst_index = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
};

// Central finite differences against the tape gradient for one leaf.
// Relative error uses max(|analytic|, |numeric|, eps) with eps = 1e-12.
template <class Real>
GradCheckReport check_gradient(const Program<Real>& p, size_t leaf, Real step) {
  require(step > Real(0), "check_gradient: step must be positive");
  require(leaf < p.leaves.size(), "check_gradient: leaf index out of range");

  auto eval = [&](const Program<Real>& q) -> Real {
    BuiltProgram<Real> bp = run_program(q);
    return bp.tape->scalar(bp.output);
  };

  // Determinism guard: two independent forward executions must agree bitwise.
  Real y0 = eval(p);
  Real y1 = eval(p);
  if (std::memcmp(&y0, &y1, sizeof(Real)) != 0)
    fail("check_gradient: program is not deterministic (two forward passes differ)");

  GradBundle<Real> analytic = evaluate_and_backward(p, Real(1));
  const std::vector<Real>& g = analytic.grads[leaf];

  GradCheckReport rep;
  Program<Real> q = p;
  for (size_t i = 0; i < g.size(); i++) {
    Real saved = q.leaves[leaf].values[i];
    q.leaves[leaf].values[i] = saved + step;
    Real fp = eval(q);
    q.leaves[leaf].values[i] = saved - step;
    Real fm = eval(q);
    q.leaves[leaf].values[i] = saved;
    double numeric = (double(fp) - double(fm)) / (2.0 * double(step));
    double a = double(g[i]);
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
    double rel = std::fabs(a - numeric) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = a;
      rep.numeric_at_worst = numeric;
    }
  }
  return rep;
}

}  // namespace diffsrl::ad

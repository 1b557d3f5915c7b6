#pragma once

#include "diffsrl/models.hpp"

namespace diffsrl::nn {

// Adam with double-precision moment accumulators (safe for f32 training) and
// optional global gradient-norm clipping.
template <class Real>
class Adam {
 public:
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int warmup_steps = 0;  // linear lr ramp over the first steps

  explicit Adam(const ParamSet<Real>& params, double lr_ = 1e-3) : lr(lr_) {
    m_.resize(params.tensors.size());
    v_.resize(params.tensors.size());
    for (size_t i = 0; i < params.tensors.size(); i++) {
      m_[i].assign(params.tensors[i].data.size(), 0.0);
      v_[i].assign(params.tensors[i].data.size(), 0.0);
    }
  }

  // grads[i] aligns with params.tensors[i]. clip_norm <= 0 disables clipping.
  void step(ParamSet<Real>& params, const std::vector<std::vector<Real>>& grads,
            double clip_norm = 0) {
    require(grads.size() == params.tensors.size(), "adam: gradient count mismatch");
    double scale = 1.0;
    if (clip_norm > 0) {
      double norm2 = 0;
      for (const auto& g : grads)
        for (Real x : g) norm2 += double(x) * double(x);
      double norm = std::sqrt(norm2);
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    t_++;
    double lr_t = lr;
    if (warmup_steps > 0 && t_ < warmup_steps)
      lr_t = lr * double(t_) / double(warmup_steps);
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (size_t i = 0; i < grads.size(); i++) {
      auto& data = params.tensors[i].data;
      require(grads[i].size() == data.size(), "adam: gradient shape mismatch");
      for (size_t j = 0; j < data.size(); j++) {
        double g = double(grads[i][j]) * scale;
        m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
        v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        data[j] = Real(double(data[j]) - lr_t * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace diffsrl::nn

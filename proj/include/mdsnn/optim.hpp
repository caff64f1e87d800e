#pragma once

#include <cmath>
#include <vector>

#include "mdsnn/error.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

// lr_e = base * (1 + cos(pi * e / E)) / 2
inline double cosine_lr(double base, int epoch, int epochs) {
  constexpr double kPi = 3.14159265358979323846;
  if (epochs <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(kPi * epoch / epochs));
}

// SGD with heavy-ball momentum and L2 weight decay:
//   v <- mu * v + (g + wd * w);  w <- w - lr * v
template <typename Real = double>
class Sgd {
 public:
  Sgd(const std::vector<Parameter<Real>>& params, double momentum,
      double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    if (momentum < 0 || momentum >= 1) {
      throw ConfigError("optim.momentum must be in [0, 1)");
    }
    if (weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
    for (const auto& p : params) velocity_.emplace_back(p.value.shape());
  }

  void step(std::vector<Parameter<Real>>& params,
            const std::vector<Tensor<Real>>& grads, double lr) {
    if (grads.size() != params.size() || params.size() != velocity_.size()) {
      throw UsageError("Sgd::step: parameter/gradient count mismatch");
    }
    const Real mu = static_cast<Real>(momentum_);
    const Real wd = static_cast<Real>(weight_decay_);
    const Real rate = static_cast<Real>(lr);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k].value;
      auto& v = velocity_[k];
      const auto& g = grads[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] + g[i] + wd * w[i];
        w[i] -= rate * v[i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<Real>> velocity_;
};

}  // namespace mdsnn

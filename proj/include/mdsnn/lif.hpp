#pragma once

#include <string>
#include <utility>

#include "mdsnn/error.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

// Membrane potential of one LIF layer plus its leak and firing threshold.
template <typename Real = double>
struct LIFState {
  Tensor<Real> u;
  Real tau_m;
  Real v_th;

  LIFState(Tensor<Real> potential, Real leak, Real threshold)
      : u(std::move(potential)), tau_m(leak), v_th(threshold) {
    if (!(leak > 0 && leak <= 1)) {
      throw ConfigError("tau_m must lie in (0, 1], got " + std::to_string(leak));
    }
    if (!(threshold > 0)) {
      throw ConfigError("v_th must be positive, got " +
                        std::to_string(threshold));
    }
  }

  static LIFState resting(Shape shape, Real leak, Real threshold) {
    return LIFState(Tensor<Real>(std::move(shape)), leak, threshold);
  }
};

template <typename Real = double>
struct LIFStepResult {
  Tensor<Real> spikes;
  Tensor<Real> membrane;  // u' before the threshold test and the reset
  LIFState<Real> state;
};

// u' = tau_m * u + I; spike where u' > v_th (strict); fired neurons reset to
// exactly zero, the rest keep u'.
template <typename Real>
LIFStepResult<Real> lif_step(const LIFState<Real>& state,
                             const Tensor<Real>& current) {
  require_same_shape("lif_step", state.u, current);
  Tensor<Real> membrane(current.shape());
  for (std::size_t i = 0; i < current.size(); ++i) {
    membrane[i] = state.tau_m * state.u[i] + current[i];
  }
  Tensor<Real> spikes(current.shape());
  Tensor<Real> next = membrane;
  for (std::size_t i = 0; i < membrane.size(); ++i) {
    if (membrane[i] > state.v_th) {
      spikes[i] = 1;
      next[i] = 0;
    }
  }
  return {std::move(spikes), std::move(membrane),
          LIFState<Real>(std::move(next), state.tau_m, state.v_th)};
}

}  // namespace mdsnn

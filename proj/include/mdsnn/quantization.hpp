#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/lif.hpp"
#include "mdsnn/tensor.hpp"

// Fake quantization with a tanh transform and a per-tensor dynamic scale:
//
//   Q(w, b) = alpha * Round(clamp(tanh(w) / alpha, -1, 1) * D) / D
//   alpha   = max |tanh(w)|,   D = 2^(b-1) - 1
//
// Batch-norm parameters use alpha = 1 and a clamp narrowed by 1/(D+1) on
// each side. Round is half-away-from-zero so Q stays odd-symmetric.
namespace mdsnn {

enum class QuantKind { kWeightMembrane, kBatchNorm };

struct QuantSpec {
  int bits = 8;
  QuantKind kind = QuantKind::kWeightMembrane;
  bool enabled = true;

  QuantSpec() = default;
  QuantSpec(int b, QuantKind k, bool on = true) : bits(b), kind(k), enabled(on) {
    validate();
  }

  void validate() const {
    if (bits < 2 || bits > 31) {
      throw ConfigError("quantizer bit-width must be in [2, 31], got " +
                        std::to_string(bits));
    }
  }

  std::int64_t levels() const { return (std::int64_t{1} << (bits - 1)) - 1; }

  // Symmetric clamp bound of the batch-norm quantizer.
  double bn_bound() const {
    return 1.0 - 1.0 / static_cast<double>(levels() + 1);
  }
};

struct ScaleRecord {
  double alpha = 0;
};

template <typename Real = double>
struct QuantResult {
  Tensor<Real> q;
  ScaleRecord scale;
};

namespace detail {

template <typename Real>
void require_finite(const char* op, const Tensor<Real>& w) {
  if (!w.all_finite()) {
    throw NumericError(std::string(op) + ": input contains non-finite values");
  }
}

template <typename Real>
Real snap_transformed(Real tanh_x, Real alpha, Real levels) {
  const Real bar = std::clamp(tanh_x / alpha, Real(-1), Real(1));
  return alpha * std::round(bar * levels) / levels;
}

template <typename Real>
Real snap(Real x, Real alpha, Real levels) {
  return snap_transformed(std::tanh(x), alpha, levels);
}

}  // namespace detail

template <typename Real>
QuantResult<Real> quantize(const Tensor<Real>& w, const QuantSpec& spec) {
  if (spec.kind != QuantKind::kWeightMembrane) {
    throw ConfigError("quantize: spec is not a weight/membrane quantizer");
  }
  spec.validate();
  detail::require_finite("quantize", w);
  Tensor<Real> th = map(w, [](Real v) { return std::tanh(v); });
  Real alpha = 0;
  for (auto v : th.data()) alpha = std::max(alpha, std::abs(v));
  if (alpha == Real(0)) return {Tensor<Real>(w.shape()), ScaleRecord{0}};
  const Real levels = static_cast<Real>(spec.levels());
  for (auto& v : th.data()) v = detail::snap_transformed(v, alpha, levels);
  return {std::move(th), ScaleRecord{static_cast<double>(alpha)}};
}

template <typename Real>
Tensor<Real> quantize_bn(const Tensor<Real>& w, const QuantSpec& spec) {
  if (spec.kind != QuantKind::kBatchNorm) {
    throw ConfigError("quantize_bn: spec is not a batch-norm quantizer");
  }
  spec.validate();
  detail::require_finite("quantize_bn", w);
  const Real levels = static_cast<Real>(spec.levels());
  const Real bound = static_cast<Real>(spec.bn_bound());
  return map(w, [levels, bound](Real v) {
    return std::clamp(detail::snap(v, Real(1), levels), -bound, bound);
  });
}

// Replaces the membrane potential by its quantized value. Disabled specs
// pass the state through.
template <typename Real>
LIFState<Real> quantize_membrane_inline(const LIFState<Real>& state,
                                        const QuantSpec& spec) {
  if (!spec.enabled) return state;
  return LIFState<Real>(quantize(state.u, spec).q, state.tau_m, state.v_th);
}

// Straight-through fake quantization on a tape. The gradient is passed
// unchanged; the clamp of tanh(x)/alpha never engages because alpha is the
// per-tensor maximum, so clipped and plain STE coincide here.
template <typename Real>
Var<Real> ste_quantize(const Var<Real>& x, const QuantSpec& spec) {
  if (!spec.enabled) return x;
  QuantResult<Real> r = quantize(x.value(), spec);
  return x.tape->record("ste_quantize", std::move(r.q), {x},
                        [x](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(x, g);
                        });
}

// Straight-through batch-norm parameter quantizer: gradient passes where
// the unclamped grid value lies inside the narrowed range, zero where the
// clamp is active.
template <typename Real>
Var<Real> ste_quantize_bn(const Var<Real>& x, const QuantSpec& spec) {
  if (!spec.enabled) return x;
  Tensor<Real> q = quantize_bn(x.value(), spec);
  const Real levels = static_cast<Real>(spec.levels());
  const Real bound = static_cast<Real>(spec.bn_bound());
  return x.tape->record(
      "ste_quantize_bn", std::move(q), {x},
      [x, levels, bound](Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> gx = g;
        const auto& xv = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (std::abs(detail::snap(xv[i], Real(1), levels)) > bound) gx[i] = 0;
        }
        t.accumulate(x, gx);
      });
}

}  // namespace mdsnn

#pragma once

#include <cmath>
#include <string>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/error.hpp"

namespace mdsnn {

enum class SurrogateKind { kTriangle, kRectangle };

inline SurrogateKind parse_surrogate_kind(const std::string& s) {
  if (s == "triangle") return SurrogateKind::kTriangle;
  if (s == "rectangle") return SurrogateKind::kRectangle;
  throw ConfigError("unknown surrogate kind '" + s + "'");
}

inline std::string to_string(SurrogateKind k) {
  return k == SurrogateKind::kTriangle ? "triangle" : "rectangle";
}

// Stand-in derivative of the Heaviside firing function, used only on the
// backward pass. Supported on [v_th - width, v_th + width] and integrating
// to one over it.
struct SurrogateSpec {
  SurrogateKind kind = SurrogateKind::kTriangle;
  double width = 1.0;

  SurrogateSpec() = default;
  SurrogateSpec(SurrogateKind k, double w) : kind(k), width(w) {
    if (!(w > 0)) throw ConfigError("surrogate width must be positive");
  }

  template <typename Real>
  Real derivative(Real u, Real v_th) const {
    const Real w = static_cast<Real>(width);
    const Real d = std::abs(u - v_th);
    if (d > w) return Real(0);
    if (kind == SurrogateKind::kTriangle) return (Real(1) - d / w) / w;
    return Real(1) / (2 * w);
  }
};

// s = 1[u > v_th]. Backward multiplies the incoming gradient by the
// surrogate derivative at u.
template <typename Real>
Var<Real> spike(const Var<Real>& u, Real v_th, const SurrogateSpec& surrogate) {
  Tensor<Real> out(u.shape());
  const auto& uv = u.value();
  for (std::size_t i = 0; i < uv.size(); ++i) out[i] = uv[i] > v_th ? 1 : 0;
  return u.tape->record(
      "spike", std::move(out), {u},
      [u, v_th, surrogate](Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> gu = g;
        const auto& uv = u.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gu[i] *= surrogate.derivative(uv[i], v_th);
        }
        t.accumulate(u, gu);
      });
}

}  // namespace mdsnn

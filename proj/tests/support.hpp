#pragma once

// Shared test helpers: random tensors, a central finite-difference gradient
// checker, and independent scalar oracles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn::test {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1,
                                    double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

using ScalarGraph =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Largest norm-wise relative error ||g_analytic - g_fd|| / max(||g_a||, ||g_fd||)
// over all inputs, with central differences of step h. Inputs whose
// gradients are both below `floor` in norm count as matching.
inline double gradient_error(const std::vector<Tensor<double>>& inputs, const ScalarGraph& f,
                             double h = 1e-5, double floor = 1e-10) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
    tape.backward(f(tape, leaves));
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x, false));
    return f(tape, leaves).value()[0];
  };
  double worst = 0;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      probe[k][i] = inputs[k][i] + h;
      const double up = eval(probe);
      probe[k][i] = inputs[k][i] - h;
      const double down = eval(probe);
      probe[k][i] = inputs[k][i];
      const double fd = (up - down) / (2 * h);
      const double a = analytic[k][i];
      diff2 += (a - fd) * (a - fd);
      a2 += a * a;
      n2 += fd * fd;
    }
    const double scale = std::sqrt(std::max(a2, n2));
    if (scale < floor) continue;
    worst = std::max(worst, std::sqrt(diff2) / scale);
  }
  return worst;
}

// Scalar LIF neuron, one step at a time.
struct ScalarLif {
  double u = 0;
  double tau = 0.5;
  double v_th = 1.0;

  // Returns (membrane before reset, spike).
  std::pair<double, int> step(double current) {
    const double m = tau * u + current;
    const int s = m > v_th ? 1 : 0;
    u = s ? 0.0 : m;
    return {m, s};
  }
};

// tau_a * tau_b * mean_batch sum_f p (log p - log q), p = softmax(b / tau_b),
// q = softmax(a / tau_a), by direct summation in long double.
inline long double kl_oracle(const std::vector<double>& a, const std::vector<double>& b,
                             std::size_t rows, double tau_a, double tau_b) {
  const std::size_t f = a.size() / rows;
  long double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    long double za = 0, zb = 0;
    for (std::size_t j = 0; j < f; ++j) {
      za += std::exp(static_cast<long double>(a[r * f + j]) / tau_a);
      zb += std::exp(static_cast<long double>(b[r * f + j]) / tau_b);
    }
    for (std::size_t j = 0; j < f; ++j) {
      const long double p = std::exp(static_cast<long double>(b[r * f + j]) / tau_b) / zb;
      const long double q = std::exp(static_cast<long double>(a[r * f + j]) / tau_a) / za;
      total += p * (std::log(p) - std::log(q));
    }
  }
  return static_cast<long double>(tau_a) * tau_b * total / static_cast<long double>(rows);
}

// Eq.-level reference quantizer written independently of the library.
inline std::vector<double> quant_oracle(const std::vector<double>& w, int bits) {
  const double levels = std::pow(2.0, bits - 1) - 1;
  double alpha = 0;
  for (double v : w) alpha = std::max(alpha, std::fabs(std::tanh(v)));
  std::vector<double> q(w.size(), 0.0);
  if (alpha == 0) return q;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double bar = std::tanh(w[i]) / alpha;
    bar = bar < -1 ? -1 : (bar > 1 ? 1 : bar);
    const double scaled = bar * levels;
    const double r = scaled >= 0 ? std::floor(scaled + 0.5) : -std::floor(-scaled + 0.5);
    q[i] = alpha * r / levels;
  }
  return q;
}

}  // namespace mdsnn::test

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/ops.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

enum class MembraneLossKind { kKl, kMse };

inline MembraneLossKind parse_membrane_loss(const std::string& s) {
  if (s == "kl") return MembraneLossKind::kKl;
  if (s == "mse") return MembraneLossKind::kMse;
  throw ConfigError("unknown membrane loss '" + s + "' (expected kl or mse)");
}

inline std::string to_string(MembraneLossKind k) {
  return k == MembraneLossKind::kKl ? "kl" : "mse";
}

// Weights and temperatures of the composite student objective
//   L = alpha_ce * CE + beta_logit * D(z_t, z_s) + gamma_mem * L_mem.
struct DistillConfig {
  double alpha_ce = 1.0;
  double beta_logit = 3.0;
  double gamma_mem = 1.0;
  double logit_tau_a = 4.0;
  double logit_tau_b = 4.0;
  double mem_tau_a = 1.0;
  double mem_tau_b = 1.0;
  Granularity granularity = Granularity::kGroup;
  MembraneLossKind membrane_loss = MembraneLossKind::kKl;

  void validate() const {
    if (alpha_ce < 0 || beta_logit < 0 || gamma_mem < 0) {
      throw ConfigError("distillation loss weights must be nonnegative");
    }
    if (!(logit_tau_a > 0 && logit_tau_b > 0 && mem_tau_a > 0 && mem_tau_b > 0)) {
      throw ConfigError("distillation temperatures must be positive");
    }
  }

  bool distills() const { return beta_logit > 0 || gamma_mem > 0; }
};

namespace detail {

template <typename Real>
Tensor<Real> as_rows(const Tensor<Real>& x) {
  if (x.rank() == 1) return x.reshaped(Shape{1, x.size()});
  return x.reshaped(Shape{x.dim(0), x.size() / x.dim(0)});
}

}  // namespace detail

// tau_a * tau_b * mean_batch sum_f p_f (log p_f - log q_f) with
// p = softmax(b / tau_b) the target and q = softmax(a / tau_a). Each sample
// is flattened to one feature axis.
template <typename Real>
Real d_kl(const Tensor<Real>& a, const Tensor<Real>& b, Real tau_a, Real tau_b) {
  require_same_shape("d_kl", a, b);
  const Tensor<Real> la = log_softmax_rows(detail::as_rows(a), tau_a);
  const Tensor<Real> lb = log_softmax_rows(detail::as_rows(b), tau_b);
  const std::size_t rows = la.dim(0), f = la.dim(1);
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t i = r * f + j;
      acc += std::exp(lb[i]) * (lb[i] - la[i]);
    }
    total += acc;
  }
  return tau_a * tau_b * total / static_cast<Real>(rows);
}

template <typename Real>
Var<Real> d_kl(const Var<Real>& a, const Var<Real>& b, Real tau_a, Real tau_b) {
  detail::require_same("d_kl", a, b);
  const Tensor<Real> la = log_softmax_rows(detail::as_rows(a.value()), tau_a);
  const Tensor<Real> lb = log_softmax_rows(detail::as_rows(b.value()), tau_b);
  const std::size_t rows = la.dim(0), f = la.dim(1);
  Real total = 0;
  for (std::size_t i = 0; i < la.size(); ++i) {
    total += std::exp(lb[i]) * (lb[i] - la[i]);
  }
  const Real prefactor = tau_a * tau_b / static_cast<Real>(rows);
  return a.tape->record(
      "d_kl", Tensor<Real>::scalar(prefactor * total), {a, b},
      [a, b, la, lb, rows, f, prefactor, tau_a, tau_b](Tape<Real>& t,
                                                       const Tensor<Real>& g) {
        const Real w = g[0] * prefactor;
        Tensor<Real> ga(Shape{rows, f}), gb(Shape{rows, f});
        for (std::size_t r = 0; r < rows; ++r) {
          // d/db_k = p_k (h_k - sum_f p_f h_f) / tau_b with h = log p - log q
          Real mean_h = 0;
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t i = r * f + j;
            mean_h += std::exp(lb[i]) * (lb[i] - la[i]);
          }
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t i = r * f + j;
            const Real p = std::exp(lb[i]), q = std::exp(la[i]);
            gb[i] = w * p * ((lb[i] - la[i]) - mean_h) / tau_b;
            ga[i] = -w * (p - q) / tau_a;
          }
        }
        t.accumulate(a, ga.reshaped(a.shape()));
        t.accumulate(b, gb.reshaped(b.shape()));
      });
}

// Teacher and student membranes at one tap, aligned by absolute timestep.
template <typename Real = double>
struct MembraneTap {
  std::size_t tap = 0;
  std::vector<Var<Real>> teacher;  // one per student timestep
  std::vector<Var<Real>> student;
};

// Pairs teacher membranes captured over T steps with student membranes over
// t <= T steps: timestep j of the student is matched with timestep j of the
// teacher, and teacher steps beyond t go unused.
template <typename Real>
std::vector<MembraneTap<Real>> align_versatile(
    const std::vector<std::vector<Var<Real>>>& teacher, int teacher_timesteps,
    const std::vector<std::vector<Var<Real>>>& student, int student_timesteps) {
  if (student_timesteps < 1 || student_timesteps > teacher_timesteps) {
    throw ConfigError("student timesteps t=" + std::to_string(student_timesteps) +
                      " must satisfy 1 <= t <= T=" +
                      std::to_string(teacher_timesteps));
  }
  if (teacher.size() != student.size()) {
    throw ShapeError("tap count mismatch: teacher has " +
                     std::to_string(teacher.size()) + ", student has " +
                     std::to_string(student.size()));
  }
  const auto t = static_cast<std::size_t>(student_timesteps);
  std::vector<MembraneTap<Real>> out;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].size() < static_cast<std::size_t>(teacher_timesteps) ||
        student[i].size() < t) {
      throw ShapeError("tap " + std::to_string(i) +
                       " is missing timesteps (teacher " +
                       std::to_string(teacher[i].size()) + ", student " +
                       std::to_string(student[i].size()) + ")");
    }
    MembraneTap<Real> tap{i, {}, {}};
    for (std::size_t j = 0; j < t; ++j) {
      require_same_shape("align_versatile", teacher[i][j].value(),
                         student[i][j].value());
      tap.teacher.push_back(teacher[i][j]);
      tap.student.push_back(student[i][j]);
    }
    out.push_back(std::move(tap));
  }
  return out;
}

// Sum over taps and timesteps of D(M_T, M_S) in KL mode. In MSE mode each
// tap contributes the mean squared error over all its elements and
// timesteps. Teacher tensors are detached, so no gradient reaches them.
template <typename Real>
Var<Real> membrane_loss(const std::vector<MembraneTap<Real>>& taps,
                        const DistillConfig& cfg, std::size_t* terms = nullptr) {
  if (taps.empty()) throw ShapeError("membrane_loss: no taps");
  std::optional<Var<Real>> total;
  std::size_t count = 0;
  auto accumulate = [&total](const Var<Real>& v) {
    total = total ? add(*total, v) : v;
  };
  for (const auto& tap : taps) {
    if (tap.teacher.size() != tap.student.size() || tap.student.empty()) {
      throw ShapeError("membrane_loss: tap " + std::to_string(tap.tap) +
                       " has " + std::to_string(tap.teacher.size()) +
                       " teacher and " + std::to_string(tap.student.size()) +
                       " student timesteps");
    }
    if (cfg.membrane_loss == MembraneLossKind::kKl) {
      for (std::size_t j = 0; j < tap.student.size(); ++j) {
        accumulate(d_kl(detach(tap.teacher[j]), tap.student[j],
                        static_cast<Real>(cfg.mem_tau_a),
                        static_cast<Real>(cfg.mem_tau_b)));
        ++count;
      }
    } else {
      std::optional<Var<Real>> per_tap;
      for (std::size_t j = 0; j < tap.student.size(); ++j) {
        Var<Real> e = mse(tap.student[j], detach(tap.teacher[j]));
        per_tap = per_tap ? add(*per_tap, e) : e;
        ++count;
      }
      accumulate(scale(*per_tap, Real(1) / static_cast<Real>(tap.student.size())));
    }
  }
  if (terms) *terms = count;
  return *total;
}

template <typename Real = double>
struct LossBreakdown {
  Var<Real> total;
  Real ce = 0;
  Real logit = 0;
  Real mem = 0;
};

// alpha_ce * CE(z_s, y) + beta_logit * D(z_t, z_s) + gamma_mem * mem_loss.
// Terms with zero weight are not recorded. Teacher logits are detached.
template <typename Real>
LossBreakdown<Real> total_loss(const Var<Real>& logits_s,
                               const Var<Real>& logits_t,
                               std::span<const int> labels,
                               const std::optional<Var<Real>>& mem_loss,
                               const DistillConfig& cfg) {
  cfg.validate();
  LossBreakdown<Real> out;
  std::optional<Var<Real>> total;
  auto accumulate = [&total](const Var<Real>& v) {
    total = total ? add(*total, v) : v;
  };
  Var<Real> ce = cross_entropy(logits_s, labels);
  out.ce = ce.value()[0];
  accumulate(scale(ce, static_cast<Real>(cfg.alpha_ce)));
  if (cfg.beta_logit > 0) {
    Var<Real> kd = d_kl(detach(logits_t), logits_s,
                        static_cast<Real>(cfg.logit_tau_a),
                        static_cast<Real>(cfg.logit_tau_b));
    out.logit = kd.value()[0];
    accumulate(scale(kd, static_cast<Real>(cfg.beta_logit)));
  }
  if (cfg.gamma_mem > 0 && mem_loss) {
    out.mem = mem_loss->value()[0];
    accumulate(scale(*mem_loss, static_cast<Real>(cfg.gamma_mem)));
  }
  out.total = *total;
  return out;
}

}  // namespace mdsnn

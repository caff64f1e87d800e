#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mdsnn/error.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

// Sparsity is the fraction of silent neuron-timesteps:
//   1 - spikes / (neurons * T)
struct SparsityReport {
  std::vector<double> layer;  // per LIF layer
  double network = 1.0;       // weighted by layer size
  std::uint64_t total_spikes = 0;
  std::uint64_t total_neuron_steps = 0;
};

// `layer_sizes` counts every neuron observed in a layer (units times samples).
inline SparsityReport sparsity(std::span<const std::uint64_t> spike_counts,
                               std::span<const std::uint64_t> layer_sizes,
                               int timesteps) {
  if (spike_counts.size() != layer_sizes.size()) {
    throw ShapeError("sparsity: " + std::to_string(spike_counts.size()) +
                     " spike counts for " + std::to_string(layer_sizes.size()) +
                     " layers");
  }
  if (timesteps < 1) throw ConfigError("sparsity: timesteps must be >= 1");
  SparsityReport r;
  for (std::size_t i = 0; i < spike_counts.size(); ++i) {
    const std::uint64_t slots = layer_sizes[i] * static_cast<std::uint64_t>(timesteps);
    if (spike_counts[i] > slots) {
      throw Error("sparsity: layer " + std::to_string(i) + " reports " +
                  std::to_string(spike_counts[i]) + " spikes for only " +
                  std::to_string(slots) + " neuron-timesteps");
    }
    r.layer.push_back(slots ? 1.0 - static_cast<double>(spike_counts[i]) /
                                        static_cast<double>(slots)
                            : 1.0);
    r.total_spikes += spike_counts[i];
    r.total_neuron_steps += slots;
  }
  if (r.total_neuron_steps) {
    r.network = 1.0 - static_cast<double>(r.total_spikes) /
                          static_cast<double>(r.total_neuron_steps);
  }
  return r;
}

struct MembraneHistogram {
  std::size_t tap = 0;
  std::size_t timestep = 0;
  std::vector<double> edges;  // bins + 1 uniform edges
  std::vector<std::uint64_t> counts;
  double v_th = 0;

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct HistogramResult {
  MembraneHistogram hist;
  double above_threshold = 0;  // fraction of entries strictly above v_th
};

// Uniform histogram over [lo, hi]; the last bin is closed. A degenerate
// range (lo == hi) is widened to [lo, lo + 1] so equal values share bin 0.
template <typename Real>
HistogramResult membrane_hist(std::span<const Real> values, std::size_t bins,
                              double v_th, double lo, double hi) {
  if (bins < 2) throw ConfigError("membrane_hist: need at least 2 bins");
  if (!(hi >= lo)) throw ConfigError("membrane_hist: empty range");
  if (hi == lo) hi = lo + 1;
  HistogramResult r;
  r.hist.v_th = v_th;
  r.hist.counts.assign(bins, 0);
  r.hist.edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) r.hist.edges[i] = lo + width * static_cast<double>(i);
  r.hist.edges[bins] = hi;
  std::uint64_t above = 0;
  for (Real v : values) {
    const double d = static_cast<double>(v);
    if (d > v_th) ++above;
    if (d < lo || d > hi) continue;
    auto bin = static_cast<std::size_t>((d - lo) / width);
    r.hist.counts[std::min(bin, bins - 1)]++;
  }
  r.above_threshold = values.empty() ? 0.0
                                     : static_cast<double>(above) /
                                           static_cast<double>(values.size());
  return r;
}

// Range taken from the data itself.
template <typename Real>
HistogramResult membrane_hist(std::span<const Real> values, std::size_t bins,
                              double v_th) {
  if (values.empty()) return membrane_hist(values, bins, v_th, 0.0, 1.0);
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  return membrane_hist(values, bins, v_th, static_cast<double>(*mn),
                       static_cast<double>(*mx));
}

// Mean symmetrized KL, KL(p||q) + KL(q||p), between paired normalized
// histograms, each smoothed by adding 1e-9 to every bin probability.
inline double membrane_divergence(std::span<const MembraneHistogram> teacher,
                                  std::span<const MembraneHistogram> student) {
  if (teacher.size() != student.size()) {
    throw ShapeError("membrane_divergence: " + std::to_string(teacher.size()) +
                     " teacher vs " + std::to_string(student.size()) +
                     " student histograms");
  }
  if (teacher.empty()) return 0.0;
  constexpr double kSmoothing = 1e-9;
  auto normalized = [](const MembraneHistogram& h) {
    const double n = static_cast<double>(std::max<std::uint64_t>(h.total(), 1));
    std::vector<double> p(h.counts.size());
    double z = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<double>(h.counts[i]) / n + kSmoothing;
      z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
  };
  double acc = 0;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    if (teacher[k].edges != student[k].edges) {
      throw ShapeError("membrane_divergence: histogram pair " + std::to_string(k) +
                       " has different bin edges");
    }
    const auto p = normalized(teacher[k]);
    const auto q = normalized(student[k]);
    double d = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      d += p[i] * std::log(p[i] / q[i]) + q[i] * std::log(q[i] / p[i]);
    }
    acc += d;
  }
  return acc / static_cast<double>(teacher.size());
}

}  // namespace mdsnn

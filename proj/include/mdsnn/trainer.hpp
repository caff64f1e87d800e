#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/config.hpp"
#include "mdsnn/data.hpp"
#include "mdsnn/distillation.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/metrics.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/optim.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

template <typename Real = double>
struct DataSplits {
  Dataset<Real> train;
  Dataset<Real> test;
};

// Train and test splits from the data section. Synthetic test data uses the
// next seed so the two splits share anchors but not noise. Standardization
// statistics come from the training split.
template <typename Real = double>
DataSplits<Real> make_datasets(const DataConfig& d, const NetConfig& model) {
  DataSplits<Real> s;
  if (d.source == "synth") {
    SynthOptions o;
    o.num_classes = d.num_classes;
    o.height = model.height;
    o.width = model.width;
    o.amplitude = d.amplitude;
    o.noise = d.noise;
    o.sigma = d.sigma;
    o.seed = d.seed;
    o.samples_per_class = d.train_per_class;
    s.train = synth_dataset<Real>(o, "train");
    o.seed = d.seed + 1;
    o.samples_per_class = d.test_per_class;
    s.test = synth_dataset<Real>(o, "test");
  } else {
    s.train = load_idx<Real>(d.train_images, d.train_labels, d.num_classes, "train");
    s.test = load_idx<Real>(d.test_images, d.test_labels, d.num_classes, "test");
  }
  if (d.standardize) {
    const ChannelStats st = channel_stats(s.train.images);
    standardize(s.train.images, st);
    standardize(s.test.images, st);
  }
  return s;
}

template <typename Real>
std::size_t argmax_row(const Tensor<Real>& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  }
  return best;
}

template <typename Real = double>
struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0;
  std::vector<std::uint64_t> spike_counts;  // per LIF layer
  std::vector<std::uint64_t> layer_sizes;   // neurons per layer times samples
  SparsityReport sparsity;
  Tensor<Real> logits;                      // [N, classes]
  std::vector<std::size_t> tap_sites;
  std::vector<std::vector<std::vector<Real>>> membranes;  // [tap][t] flat values
  std::vector<std::vector<Tensor<Real>>> membrane_tensors;  // [tap][t] [N, ...]
};

struct EvalOptions {
  int timesteps = 4;
  NetQuant quant;
  std::size_t batch_size = 64;
  std::optional<Granularity> capture;  // capture membranes at these taps
};

// Evaluation-mode pass over a dataset in fixed order.
template <typename Real>
EvalResult<Real> evaluate(ResidualNet<Real>& net, const Dataset<Real>& data,
                          const EvalOptions& opt) {
  EvalResult<Real> r;
  const std::size_t n = data.size();
  const auto& sites = net.lif_sites();
  r.spike_counts.assign(sites.size(), 0);
  for (const auto& s : sites) r.layer_sizes.push_back(numel(s.shape) * n);
  std::vector<Tensor<Real>> logit_parts;
  std::vector<std::vector<std::vector<Tensor<Real>>>> parts;  // [batch][tap][t]
  for (std::size_t lo = 0; lo < n; lo += opt.batch_size) {
    const std::size_t hi = std::min(n, lo + opt.batch_size);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const Tensor<Real> x = gather_rows(data.images, std::span<const std::size_t>(idx));
    NetworkRun<Real> run = run_network(net, x, opt.timesteps,
                                       opt.capture.value_or(Granularity::kGroup), opt.quant);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (static_cast<int>(argmax_row(run.logits, i)) == data.labels[idx[i]]) ++r.correct;
    }
    for (std::size_t l = 0; l < sites.size(); ++l) r.spike_counts[l] += run.spike_counts[l];
    logit_parts.push_back(std::move(run.logits));
    if (opt.capture) {
      r.tap_sites = run.tap_sites;
      parts.push_back(std::move(run.membranes));
    }
  }
  r.total = n;
  r.accuracy = n ? static_cast<double>(r.correct) / static_cast<double>(n) : 0.0;
  r.sparsity = sparsity(r.spike_counts, r.layer_sizes, opt.timesteps);
  r.logits = concat_rows(std::span<const Tensor<Real>>(logit_parts));
  if (opt.capture && !parts.empty()) {
    const std::size_t taps = parts[0].size();
    r.membranes.resize(taps);
    r.membrane_tensors.resize(taps);
    for (std::size_t k = 0; k < taps; ++k) {
      for (std::size_t t = 0; t < static_cast<std::size_t>(opt.timesteps); ++t) {
        std::vector<Tensor<Real>> chunks;
        for (auto& b : parts) chunks.push_back(std::move(b[k][t]));
        Tensor<Real> all = concat_rows(std::span<const Tensor<Real>>(chunks));
        r.membranes[k].emplace_back(all.data().begin(), all.data().end());
        r.membrane_tensors[k].push_back(std::move(all));
      }
    }
  }
  return r;
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0;
  double loss = 0;
  double ce = 0;
  double logit = 0;
  double mem = 0;
  double train_acc = 0;
  double test_acc = 0;
  double sparsity = 0;
  std::vector<double> layer_sparsity;
};

using EpochSink = std::function<void(const EpochRecord&)>;

// Teacher outputs over the training set, computed once per student run.
template <typename Real = double>
struct TeacherCache {
  int timesteps = 0;
  Tensor<Real> logits;                                    // [N, classes]
  std::vector<std::vector<Tensor<Real>>> membranes;       // [tap][T] [N, ...]
};

template <typename Real>
TeacherCache<Real> cache_teacher(ResidualNet<Real>& teacher, const Dataset<Real>& train,
                                 int teacher_timesteps, Granularity taps,
                                 std::size_t batch_size) {
  EvalOptions eo;
  eo.timesteps = teacher_timesteps;
  eo.batch_size = batch_size;
  eo.capture = taps;
  EvalResult<Real> e = evaluate(teacher, train, eo);
  return {teacher_timesteps, std::move(e.logits), std::move(e.membrane_tensors)};
}

template <typename Real = double>
struct TrainResult {
  ResidualNet<Real> net;
  std::vector<EpochRecord> records;
  EvalResult<Real> final_eval;
};

// BPTT training of one network. Students receive the frozen teacher; its
// outputs are precomputed in evaluation mode over the full T steps.
template <typename Real>
TrainResult<Real> train(const RunConfig& cfg, const DataSplits<Real>& data,
                        std::type_identity_t<ResidualNet<Real>>* teacher = nullptr,
                        EpochSink sink = {}) {
  cfg.validate();
  const bool distill = cfg.role == Role::kStudent && cfg.distill.distills();
  if (distill && !teacher) throw MissingTeacherError("train: student distillation needs a teacher");
  const bool use_mem = distill && cfg.distill.gamma_mem > 0;
  const NetQuant quant = cfg.role == Role::kTeacher ? NetQuant{} : cfg.quant;

  TrainResult<Real> out{ResidualNet<Real>(cfg.model, cfg.seed), {}, {}};
  ResidualNet<Real>& net = out.net;
  const Dataset<Real>& train_set = data.train;
  const std::size_t n = train_set.size();
  if (n == 0) throw ConfigError("train: empty training set");

  std::optional<TeacherCache<Real>> cache;
  if (distill) {
    if (teacher->config().describe() != net.config().describe()) {
      throw ConfigError("teacher topology '" + teacher->config().describe() +
                        "' differs from student '" + net.config().describe() + "'");
    }
    cache = cache_teacher(*teacher, train_set, cfg.teacher_timesteps,
                          cfg.distill.granularity, 64);
  }

  Sgd<Real> opt(net.params(), cfg.optim.momentum, cfg.optim.weight_decay);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double base_lr = cfg.optim.effective_lr(cfg.role);

  EvalOptions eval_opt;
  eval_opt.timesteps = cfg.timesteps;
  eval_opt.quant = quant;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(base_lr, epoch, cfg.epochs);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    std::size_t correct = 0;
    int step = 0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size, ++step) {
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Tensor<Real> x = gather_rows(train_set.images, idx);
      std::vector<int> y;
      for (auto i : idx) y.push_back(train_set.labels[i]);
      try {
        Tape<Real> tape;
        ForwardOptions fo;
        fo.timesteps = cfg.timesteps;
        fo.training = true;
        fo.quant = quant;
        fo.taps = cfg.distill.granularity;
        fo.capture = use_mem;
        ForwardPass<Real> pass = forward(tape, net, x, fo);

        Var<Real> teacher_logits = pass.logits;
        std::optional<Var<Real>> mem;
        if (distill) {
          teacher_logits = tape.constant(gather_rows(cache->logits, idx), "teacher.logits");
          if (use_mem) {
            std::vector<std::vector<Var<Real>>> tv(cache->membranes.size());
            for (std::size_t k = 0; k < tv.size(); ++k) {
              for (const auto& m : cache->membranes[k]) {
                tv[k].push_back(tape.constant(gather_rows(m, idx), "teacher.membrane"));
              }
            }
            auto taps = align_versatile(tv, cache->timesteps, pass.membranes, cfg.timesteps);
            mem = membrane_loss(taps, cfg.distill);
          }
        }
        LossBreakdown<Real> loss = total_loss(pass.logits, teacher_logits,
                                              std::span<const int>(y), mem, cfg.distill);
        tape.backward(loss.total);
        std::vector<Tensor<Real>> grads;
        for (const auto& p : pass.params) grads.push_back(tape.grad(p));
        opt.step(net.params(), grads, lr);

        const double w = static_cast<double>(idx.size());
        rec.loss += w * static_cast<double>(loss.total.value()[0]);
        rec.ce += w * static_cast<double>(loss.ce);
        rec.logit += w * static_cast<double>(loss.logit);
        rec.mem += w * static_cast<double>(loss.mem);
        const Tensor<Real>& z = pass.logits.value();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (static_cast<int>(argmax_row(z, i)) == y[i]) ++correct;
        }
      } catch (const NumericError& e) {
        throw DivergenceError(epoch + 1, step, e.what());
      }
    }
    for (auto& p : net.params()) {
      if (!p.value.all_finite()) {
        throw DivergenceError(epoch + 1, step, "parameter '" + p.name + "' became non-finite");
      }
    }
    const double nn = static_cast<double>(n);
    rec.loss /= nn;
    rec.ce /= nn;
    rec.logit /= nn;
    rec.mem /= nn;
    rec.train_acc = static_cast<double>(correct) / nn;
    EvalResult<Real> test = evaluate(net, data.test, eval_opt);
    rec.test_acc = test.accuracy;
    rec.sparsity = test.sparsity.network;
    rec.layer_sparsity = test.sparsity.layer;
    if (sink) sink(rec);
    out.records.push_back(std::move(rec));
  }
  out.final_eval = evaluate(net, data.test, eval_opt);
  return out;
}

// Histograms over paired teacher/student captures. Each tap gets one set of
// edges spanning the pooled teacher and student values; timesteps pair by
// index up to the student's t.
struct HistogramSet {
  std::vector<MembraneHistogram> teacher;
  std::vector<MembraneHistogram> student;
  double teacher_above = 0;  // pooled fraction strictly above v_th
  double student_above = 0;
};

template <typename Real>
HistogramSet paired_histograms(const EvalResult<Real>& teacher, const EvalResult<Real>& student,
                               std::size_t bins, double v_th) {
  if (teacher.membranes.size() != student.membranes.size()) {
    throw ShapeError("paired_histograms: tap count mismatch");
  }
  HistogramSet h;
  std::uint64_t t_above = 0, t_total = 0, s_above = 0, s_total = 0;
  for (std::size_t k = 0; k < teacher.membranes.size(); ++k) {
    const std::size_t steps = student.membranes[k].size();
    if (steps > teacher.membranes[k].size()) {
      throw ShapeError("paired_histograms: student has more timesteps than teacher");
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t t = 0; t < steps; ++t) {
      for (const auto* vals : {&teacher.membranes[k][t], &student.membranes[k][t]}) {
        for (Real v : *vals) {
          lo = std::min(lo, static_cast<double>(v));
          hi = std::max(hi, static_cast<double>(v));
        }
      }
    }
    if (!(lo <= hi)) lo = hi = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      auto a = membrane_hist(std::span<const Real>(teacher.membranes[k][t]), bins, v_th, lo, hi);
      auto b = membrane_hist(std::span<const Real>(student.membranes[k][t]), bins, v_th, lo, hi);
      a.hist.tap = b.hist.tap = k;
      a.hist.timestep = b.hist.timestep = t;
      for (Real v : teacher.membranes[k][t]) t_above += static_cast<double>(v) > v_th;
      for (Real v : student.membranes[k][t]) s_above += static_cast<double>(v) > v_th;
      t_total += teacher.membranes[k][t].size();
      s_total += student.membranes[k][t].size();
      h.teacher.push_back(std::move(a.hist));
      h.student.push_back(std::move(b.hist));
    }
  }
  h.teacher_above = t_total ? static_cast<double>(t_above) / static_cast<double>(t_total) : 0.0;
  h.student_above = s_total ? static_cast<double>(s_above) / static_cast<double>(s_total) : 0.0;
  return h;
}

}  // namespace mdsnn

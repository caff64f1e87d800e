// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 1 5 10     a subset
//
// Criteria 6-9 share one training study (three seeds, f32).

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdsnn/cli.hpp"
#include "mdsnn/mdsnn.hpp"
#include "support.hpp"
#include "tiny.hpp"

namespace fs = std::filesystem;
using namespace mdsnn;
using T = Tensor<double>;
using V = Var<double>;

namespace {

// --- pinned tolerances -------------------------------------------------------

constexpr double kQuantTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kKlTol = 1e-8;
constexpr double kAccuracyGapPp = 0.3;
constexpr int kGradConfigs = 60;
constexpr int kSeeds = 3;

// --- reporting ---------------------------------------------------------------

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Check {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok && failures_++ < 5) first_ += (first_.empty() ? "" : "; ") + what;
  }
  Outcome outcome(std::string detail) const {
    if (failures_) detail += " | " + std::to_string(failures_) + " failures: " + first_;
    return {failures_ == 0, detail};
  }

 private:
  int failures_ = 0;
  std::string first_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1: quantizer properties -----------------------------------------------------

Outcome quantizer_properties() {
  Check c;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  std::uniform_real_distribution<double> spread(0.05, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int b = std::array{2, 4, 8}[static_cast<std::size_t>(trial % 3)];
    const QuantSpec spec(b, QuantKind::kWeightMembrane);
    const double levels = static_cast<double>(spec.levels());
    const double s = spread(rng);
    const T w = test::random_tensor({len(rng)}, rng, -s, s);
    const auto r = quantize(w, spec);
    const auto rn = quantize(map(w, [](double v) { return -v; }), spec);
    const double alpha = r.scale.alpha;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double k = r.q[i] * levels / alpha;
      c.require(std::abs(k - std::round(k)) <= kQuantTol && std::abs(std::round(k)) <= levels,
                "off-grid value");
      c.require(std::abs(r.q[i] - std::tanh(w[i])) <= alpha / (2 * levels) + kQuantTol,
                "error above alpha/(2D)");
      c.require(rn.q[i] == -r.q[i], "not odd-symmetric");
    }
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b2) { return w[a] < w[b2]; });
    for (std::size_t i = 1; i < order.size(); ++i) {
      c.require(r.q[order[i - 1]] <= r.q[order[i]], "not monotone");
    }
  }
  std::mt19937_64 bn_rng(2);
  const T wide = test::random_tensor({4096}, bn_rng, -10, 10);
  for (auto [bits, bound] : {std::pair{4, 0.875}, std::pair{8, 0.9921875}}) {
    const QuantSpec spec(bits, QuantKind::kBatchNorm);
    c.require(spec.bn_bound() == bound, "BN bound at b=" + std::to_string(bits));
    const T q = quantize_bn(wide, spec);
    c.require(max_abs(q) == bound, "BN output range at b=" + std::to_string(bits));
  }
  return c.outcome("1000 tensors, b in {2,4,8}; BN bounds 0.875 / 0.9921875");
}

// --- 2: gradient correctness -----------------------------------------------------

Outcome gradient_correctness() {
  Check c;
  double worst = 0;
  int checks = 0;
  auto expect = [&](const std::vector<T>& in, const test::ScalarGraph& f, const char* name) {
    const double e = test::gradient_error(in, f);
    worst = std::max(worst, e);
    ++checks;
    c.require(e <= kGradTol, std::string(name) + " error " + fmt("%.3g", e));
  };
  for (int cfg = 0; cfg < kGradConfigs; ++cfg) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(cfg));
    std::uniform_int_distribution<std::size_t> dim(2, 5);
    const std::size_t n = dim(rng), f = dim(rng), k = dim(rng);
    const T a = test::random_tensor({n, f}, rng), b = test::random_tensor({n, f}, rng);
    const T m = test::random_tensor({f, k}, rng), w = test::random_tensor({k, f}, rng);
    const T bias = test::random_tensor({k}, rng), probe = test::random_tensor({n, f}, rng);
    auto dot = [probe](const V& v) { return sum(mul(v, v.tape->constant(probe.reshaped(v.shape())))); };
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng() % f);

    expect({a, b}, [&](auto&, const auto& v) { return dot(add(v[0], v[1])); }, "add");
    expect({a, b}, [&](auto&, const auto& v) { return dot(sub(v[0], v[1])); }, "sub");
    expect({a, b}, [&](auto&, const auto& v) { return dot(mul(v[0], v[1])); }, "mul");
    expect({a}, [&](auto&, const auto& v) { return dot(scale(v[0], 0.37)); }, "scale");
    expect({a}, [&](auto&, const auto& v) { return mean(mul(v[0], v[0])); }, "mean");
    expect({a, m}, [&](auto&, const auto& v) {
      V y = matmul(v[0], v[1]);
      return sum(mul(y, y));
    }, "matmul");
    expect({a, w, bias}, [&](auto&, const auto& v) {
      V y = linear(v[0], v[1], &v[2]);
      return sum(mul(y, y));
    }, "linear");
    expect({a}, [&](auto&, const auto& v) { return cross_entropy(v[0], std::span<const int>(labels)); },
           "cross_entropy");
    expect({a, b}, [&](auto&, const auto& v) { return mse(v[0], v[1]); }, "mse");
    expect({a, b}, [&](auto&, const auto& v) { return d_kl(v[0], v[1], 2.0, 3.0); }, "d_kl");

    const std::size_t cin = 1 + cfg % 2, cout = 2 + cfg % 2, stride = 1 + cfg % 2;
    const T x = test::random_tensor({2, cin, 5, 4}, rng);
    const T kw = test::random_tensor({cout, cin, 3, 3}, rng);
    const T gamma = test::random_tensor({cout}, rng, 0.5, 1.5), beta = test::random_tensor({cout}, rng);
    const T pp = test::random_tensor({2, cout}, rng);
    expect({x, kw, gamma, beta}, [&](auto& tape, const auto& v) {
      BatchNormStats<double> stats(cout);
      V y = batch_norm(conv2d(v[0], v[1], stride, 1), v[2], v[3], stats,
                       BatchNormOptions{true, 0.1, 1e-5});
      return sum(mul(global_avg_pool(mul(y, y)), tape.constant(pp)));
    }, "conv/bn/pool");

    // Composite student objective, both membrane-loss modes.
    const T zs = test::random_tensor({n, f}, rng, -2, 2), zt = test::random_tensor({n, f}, rng, -2, 2);
    const T s0 = test::random_tensor({n, k}, rng), s1 = test::random_tensor({n, k}, rng);
    const T t0 = test::random_tensor({n, k}, rng), t1 = test::random_tensor({n, k}, rng);
    DistillConfig dc;
    dc.membrane_loss = cfg % 2 ? MembraneLossKind::kMse : MembraneLossKind::kKl;
    expect({zs, s0, s1}, [&](auto& tape, const auto& v) {
      std::vector<std::vector<V>> tv{{tape.constant(t0), tape.constant(t1)}};
      std::vector<std::vector<V>> sv{{v[1], v[2]}};
      V mem = membrane_loss(align_versatile(tv, 2, sv, 2), dc);
      return total_loss(v[0], tape.constant(zt), std::span<const int>(labels),
                        std::optional<V>(mem), dc)
          .total;
    }, "composite loss");

    // STE: identity gradient inside the clamp.
    Tape<double> tape;
    V xv = tape.leaf(a, true);
    tape.backward(sum(mul(ste_quantize(xv, QuantSpec(4, QuantKind::kWeightMembrane)),
                          tape.constant(probe))));
    c.require(tape.grad(xv) == probe, "STE altered the gradient");
    Tape<double> bn_tape;
    V bv = bn_tape.leaf(map(a, [](double v) { return 0.5 * v; }), true);
    bn_tape.backward(sum(ste_quantize_bn(bv, QuantSpec(8, QuantKind::kBatchNorm))));
    c.require(bn_tape.grad(bv) == T::ones(a.shape()), "BN STE altered an in-range gradient");
  }
  return c.outcome(std::to_string(kGradConfigs) + " configurations, " + std::to_string(checks) +
                   " graphs, worst relative error " + fmt("%.2e", worst));
}

// --- 3: LIF oracle -------------------------------------------------------------------

Outcome lif_oracle() {
  Check c;
  auto st = LIFState<double>::resting({1}, 0.5, 1.0);
  std::vector<double> membrane, spikes;
  for (int t = 0; t < 3; ++t) {
    auto r = lif_step(st, T::vector({0.6}));
    membrane.push_back(r.membrane[0]);
    spikes.push_back(r.spikes[0]);
    st = r.state;
  }
  const std::vector<double> expected{0.6, 0.9, 1.05};
  for (std::size_t t = 0; t < 3; ++t) {
    c.require(std::abs(membrane[t] - expected[t]) <= 1e-15, "worked trace membrane");
  }
  c.require(spikes == std::vector<double>{0, 0, 1}, "worked trace spikes");
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> n_dist(1, 64);
  std::uniform_int_distribution<int> t_dist(1, 8);
  std::uniform_real_distribution<double> tau_dist(0.05, 1.0), th_dist(0.1, 2.0);
  const int instances = 2000;
  for (int trial = 0; trial < instances; ++trial) {
    const std::size_t n = n_dist(rng);
    const int steps = t_dist(rng);
    const double tau = tau_dist(rng), vth = th_dist(rng);
    std::vector<test::ScalarLif> oracle(n, test::ScalarLif{0, tau, vth});
    auto s = LIFState<double>::resting({n}, tau, vth);
    for (int t = 0; t < steps; ++t) {
      const T current = test::random_tensor({n}, rng, -0.5, 2.0);
      auto r = lif_step(s, current);
      for (std::size_t i = 0; i < n; ++i) {
        const auto [m, spike] = oracle[i].step(current[i]);
        c.require(r.membrane[i] == m && r.spikes[i] == spike && r.state.u[i] == oracle[i].u,
                  "mismatch at trial " + std::to_string(trial));
      }
      s = r.state;
    }
  }
  return c.outcome("worked trace [0.6,0.9,1.05] -> [0,0,1]; " + std::to_string(instances) +
                   " random instances bit-exact");
}

// --- 4: KL oracle --------------------------------------------------------------------

Outcome kl_oracle() {
  Check c;
  const double worked = d_kl(T::vector({1, 0}), T::vector({0, 1}), 1.0, 1.0);
  c.require(std::abs(worked - 0.46212) < 5e-6, "worked value " + fmt("%.6f", worked));
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> tau(0.5, 5.0);
  double worst = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t rows = dim(rng), f = 1 + dim(rng);
    const T a = test::random_tensor({rows, f}, rng, -3, 3), b = test::random_tensor({rows, f}, rng, -3, 3);
    const double ta = tau(rng), tb = tau(rng);
    const double got = d_kl(a, b, ta, tb);
    const long double want = test::kl_oracle({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, rows, ta, tb);
    c.require(got >= 0, "negative KL");
    if (want > 1e-12L) {
      const double rel = static_cast<double>(std::fabs((got - want) / want));
      worst = std::max(worst, rel);
      c.require(rel <= kKlTol, "oracle error " + fmt("%.3g", rel));
    }
    c.require((got > 0) == (want > 0), "zero for distinct distributions");
    c.require(std::abs(d_kl(a, a, ta, ta)) < 1e-15, "KL(a, a) != 0");
    // Logits equal up to a shift give the same distribution.
    const T shifted = map(a, [](double v) { return v + 0.75; });
    c.require(std::abs(d_kl(a, shifted, 1.0, 1.0)) < 1e-12, "nonzero for a shifted copy");
  }
  return c.outcome("worked value " + fmt("%.5f", worked) + "; 10000 pairs, worst relative error " +
                   fmt("%.2e", worst));
}

// --- 5: FLOPs ------------------------------------------------------------------------

Outcome flops_accounting() {
  Check c;
  const ResidualNet<double> net(NetConfig{}, 0);
  const auto r = flops_report(versatile_schedule(4, {1, 2, 3, 4}, net.flops_per_timestep(), 128, 30).ledger);
  c.require(r.reduction_percent == 30.0, "reduction " + fmt("%.17g", r.reduction_percent));
  const auto unit = flops_report(versatile_schedule(4, {1, 2, 3, 4}).ledger);
  c.require(unit.versatile_flops == 14 && unit.traditional_flops == 20, "14F vs 20F");
  return c.outcome("versatile 14F, traditional 20F, reduction " + fmt("%.1f", r.reduction_percent) + "%");
}

// --- 6-9: training study -----------------------------------------------------

// Synthetic task used for the training criteria. See README for how the
// noise level was chosen.
RunConfig study_config(std::uint64_t seed) {
  RunConfig c;
  c.role = Role::kTeacher;
  c.seed = seed;
  c.precision = "f32";
  c.data.seed = 1 + seed;
  c.data.noise = 0.6;
  c.data.train_per_class = 128;
  c.data.test_per_class = 64;
  c.normalize();
  c.validate();
  return c;
}

struct StudentRun {
  double accuracy = 0, sparsity = 0, above = 0, divergence = 0;
};

struct SeedStudy {
  double teacher_accuracy = 0;
  std::map<int, StudentRun> baseline, md;  // by timestep
  StudentRun logit_only, mse;
  double t6_seconds = 0;  // teacher plus the three T=4 runs of criterion 6
};

using R = float;

SeedStudy run_seed(std::uint64_t seed) {
  SeedStudy out;
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig tc = study_config(seed);
  const auto data = make_datasets<R>(tc.data, tc.model);
  TrainResult<R> teacher = train(tc, data);
  out.teacher_accuracy = teacher.final_eval.accuracy;
  EvalOptions teo;
  teo.timesteps = tc.timesteps;
  teo.capture = Granularity::kGroup;
  const EvalResult<R> te = evaluate(teacher.net, data.test, teo);
  double c6 = seconds_since(t0);

  auto student = [&](Role role, int t, auto&& tweak) {
    const auto s0 = std::chrono::steady_clock::now();
    RunConfig s = tc;
    s.role = role;
    s.timesteps = t;
    s.quant = RunConfig{}.quant;
    s.distill = DistillConfig{};
    s.teacher_checkpoint = role == Role::kStudent ? "in-memory" : "";
    tweak(s);
    s.normalize();
    s.validate();
    TrainResult<R> r = train(s, data, role == Role::kStudent ? &teacher.net : nullptr);
    EvalOptions seo;
    seo.timesteps = t;
    seo.quant = s.quant;
    seo.capture = Granularity::kGroup;
    const EvalResult<R> se = evaluate(r.net, data.test, seo);
    const HistogramSet h = paired_histograms(te, se, s.hist_bins, s.model.v_th);
    StudentRun run{se.accuracy, se.sparsity.network, h.student_above,
                   membrane_divergence(h.teacher, h.student)};
    return std::pair{run, seconds_since(s0)};
  };
  auto none = [](RunConfig&) {};
  for (int t = 4; t >= 1; --t) {
    auto [b, bs] = student(Role::kBaseline, t, none);
    auto [m, ms] = student(Role::kStudent, t, none);
    out.baseline[t] = b;
    out.md[t] = m;
    if (t == 4) c6 += bs + ms;
  }
  auto [l, ls] = student(Role::kStudent, 4, [](RunConfig& s) { s.distill.gamma_mem = 0; });
  out.logit_only = l;
  c6 += ls;
  out.mse = student(Role::kStudent, 4, [](RunConfig& s) {
              s.distill.membrane_loss = MembraneLossKind::kMse;
            }).first;
  out.t6_seconds = c6;
  std::printf("  seed %llu: teacher %.4f | t=4 base %.4f logit %.4f md %.4f mse %.4f | "
              "div base %.3f md %.3f | sparsity kl %.4f mse %.4f | above kl %.4f mse %.4f\n",
              static_cast<unsigned long long>(seed), out.teacher_accuracy, out.baseline[4].accuracy,
              out.logit_only.accuracy, out.md[4].accuracy, out.mse.accuracy,
              out.baseline[4].divergence, out.md[4].divergence, out.md[4].sparsity,
              out.mse.sparsity, out.md[4].above, out.mse.above);
  std::printf("           t=1..3 base %.4f %.4f %.4f md %.4f %.4f %.4f (%.0f s)\n",
              out.baseline[1].accuracy, out.baseline[2].accuracy, out.baseline[3].accuracy,
              out.md[1].accuracy, out.md[2].accuracy, out.md[3].accuracy, seconds_since(t0));
  std::fflush(stdout);
  return out;
}

const std::vector<SeedStudy>& study() {
  static const std::vector<SeedStudy> runs = [] {
    std::vector<SeedStudy> v;
    for (int s = 0; s < kSeeds; ++s) v.push_back(run_seed(static_cast<std::uint64_t>(s)));
    return v;
  }();
  return runs;
}

template <typename F>
double seed_mean(F&& f) {
  double acc = 0;
  for (const auto& s : study()) acc += f(s);
  return acc / static_cast<double>(study().size());
}

Outcome distillation_ordering() {
  const double base = 100 * seed_mean([](auto& s) { return s.baseline.at(4).accuracy; });
  const double logit = 100 * seed_mean([](auto& s) { return s.logit_only.accuracy; });
  const double md = 100 * seed_mean([](auto& s) { return s.md.at(4).accuracy; });
  double secs = 0;
  for (const auto& s : study()) secs += s.t6_seconds;
  Check c;
  c.require(md >= logit, "logit+membrane below logit-only");
  c.require(logit >= base, "logit-only below no-distillation");
  c.require(md - base >= kAccuracyGapPp, "gap " + fmt("%.2f", md - base) + " pp < 0.3 pp");
  c.require(secs < 1800, "runtime " + fmt("%.0f", secs) + " s");
  return c.outcome("mean accuracy % no-distill " + fmt("%.2f", base) + ", logit " +
                   fmt("%.2f", logit) + ", logit+membrane " + fmt("%.2f", md) + " (" +
                   fmt("%.0f", secs) + " s)");
}

Outcome membrane_alignment() {
  const double base = seed_mean([](auto& s) { return s.baseline.at(4).divergence; });
  const double md = seed_mean([](auto& s) { return s.md.at(4).divergence; });
  Check c;
  c.require(md < base, "MD divergence not below baseline");
  return c.outcome("mean divergence to teacher: baseline " + fmt("%.4f", base) + ", MD " +
                   fmt("%.4f", md));
}

Outcome kl_vs_mse() {
  int wins = 0;
  std::string per_seed;
  for (const auto& s : study()) {
    const bool ok = s.md.at(4).sparsity >= s.mse.sparsity && s.md.at(4).above <= s.mse.above;
    wins += ok;
    per_seed += ok ? "+" : "-";
  }
  Check c;
  c.require(wins >= 2, "holds in only " + std::to_string(wins) + " seeds");
  return c.outcome("KL sparsity >= MSE and above-threshold mass <= MSE in " +
                   std::to_string(wins) + "/" + std::to_string(kSeeds) + " seeds [" + per_seed + "]");
}

Outcome versatile_benefit() {
  Check c;
  std::string detail;
  for (int t = 1; t <= 4; ++t) {
    const double base = 100 * seed_mean([t](auto& s) { return s.baseline.at(t).accuracy; });
    const double md = 100 * seed_mean([t](auto& s) { return s.md.at(t).accuracy; });
    c.require(md >= base, "t=" + std::to_string(t));
    detail += "t=" + std::to_string(t) + " " + fmt("%.2f", md) + " vs " + fmt("%.2f", base) +
              (t < 4 ? ", " : "");
  }
  return c.outcome("distilled vs baseline mean accuracy %: " + detail);
}

// --- 10: reproducibility ---------------------------------------------------------

std::map<std::string, std::string> metric_streams(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().extension() != ".jsonl") continue;
    // Keyed by path below the run directory, whose name carries a timestamp.
    const auto rel = fs::relative(e.path(), root);
    std::string key;
    for (auto it = std::next(rel.begin()); it != rel.end(); ++it) key += "/" + it->string();
    std::ifstream in(e.path(), std::ios::binary);
    out[key] = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  return out;
}

int cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "mdsnn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code) std::printf("  %s exited %d: %s", args[1].c_str(), code, err.str().c_str());
  return code;
}

fs::path only_child(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir)) return e.path();
  return {};
}

Outcome reproducibility() {
  Check c;
  const fs::path root = fs::temp_directory_path() / "mdsnn_acceptance_repro";
  fs::remove_all(root);
  std::vector<std::string> tiny;
  for (const auto& s : test::tiny_overrides()) {
    tiny.push_back("--set");
    tiny.push_back(s);
  }
  // A teacher checkpoint for the student command.
  std::vector<std::string> tt{"train-teacher", "--out", (root / "teacher").string()};
  tt.insert(tt.end(), tiny.begin(), tiny.end());
  c.require(cli_run(tt) == 0, "teacher setup");
  const std::string teacher = (only_child(root / "teacher") / "model.ckpt").string();

  const std::vector<std::vector<std::string>> commands{
      {"train-teacher", "--seed", "11"},
      {"train-baseline", "--seed", "12"},
      {"train-student", "--seed", "13", "--set", "run.teacher_checkpoint=" + teacher},
      {"versatile", "--teacher-timesteps", "3", "--students", "1,2,3"},
      {"ablate-loss", "--set", "run.epochs=1"},
      {"ablate-granularity", "--set", "run.epochs=1"}};
  std::size_t streams = 0;
  for (std::size_t k = 0; k < commands.size(); ++k) {
    const fs::path first = root / ("a" + std::to_string(k)), second = root / ("b" + std::to_string(k));
    std::vector<std::string> args = commands[k];
    args.insert(args.begin() + 1, {"--out", first.string()});
    args.insert(args.end(), tiny.begin(), tiny.end());
    if (cli_run(args) != 0) {
      c.require(false, commands[k][0] + " failed");
      continue;
    }
    const fs::path ini = only_child(first) / "config.ini";
    if (cli_run({commands[k][0], "--out", second.string(), "--config", ini.string()}) != 0) {
      c.require(false, commands[k][0] + " rerun failed");
      continue;
    }
    const auto a = metric_streams(first), b = metric_streams(second);
    c.require(!a.empty(), commands[k][0] + " wrote no metric stream");
    c.require(a == b, commands[k][0] + " metric streams differ");
    streams += a.size();
  }
  fs::remove_all(root);
  return c.outcome(std::to_string(commands.size()) + " commands rerun from config.ini, " +
                   std::to_string(streams) + " metric streams bit-identical");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"quantizer properties", quantizer_properties},
      {"gradient correctness", gradient_correctness},
      {"LIF oracle equivalence", lif_oracle},
      {"KL-loss oracle", kl_oracle},
      {"FLOPs accounting", flops_accounting},
      {"distillation ordering", distillation_ordering},
      {"membrane alignment", membrane_alignment},
      {"KL-vs-MSE sparsity trend", kl_vs_mse},
      {"versatile-teacher benefit", versatile_benefit},
      {"reproducibility", reproducibility}};
  const double limits[] = {10, 60, 10, 10, 1, 0, 0, 0, 0, 0};  // seconds; 0 = none

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (limits[i] > 0 && secs >= limits[i]) {
      o.pass = false;
      o.detail += " | over the " + fmt("%.0f", limits[i]) + " s limit";
    }
    failed += !o.pass;
    std::printf("CRITERION %d %s: %s: %s (%.2f s)\n", id, o.pass ? "PASS" : "FAIL",
                criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}

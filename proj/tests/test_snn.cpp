#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "mdsnn/lif.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/quantization.hpp"
#include "support.hpp"

using namespace mdsnn;
using T = Tensor<double>;

TEST(Lif, WorkedTrace) {
  auto st = LIFState<double>::resting({1}, 0.5, 1.0);
  std::vector<double> membrane, spikes;
  for (int t = 0; t < 3; ++t) {
    auto r = lif_step(st, T::vector({0.6}));
    membrane.push_back(r.membrane[0]);
    spikes.push_back(r.spikes[0]);
    st = r.state;
  }
  EXPECT_DOUBLE_EQ(membrane[0], 0.6);
  EXPECT_DOUBLE_EQ(membrane[1], 0.9);
  EXPECT_DOUBLE_EQ(membrane[2], 1.05);
  EXPECT_EQ(spikes, (std::vector<double>{0, 0, 1}));
  EXPECT_EQ(st.u[0], 0.0);
}

TEST(Lif, SilentInputStaysSilent) {
  auto st = LIFState<double>::resting({4}, 0.9, 0.5);
  for (int t = 0; t < 10; ++t) {
    auto r = lif_step(st, T(Shape{4}));
    EXPECT_EQ(r.spikes, T(Shape{4}));
    st = r.state;
  }
  EXPECT_EQ(st.u, T(Shape{4}));
}

TEST(Lif, ThresholdIsStrict) {
  auto r = lif_step(LIFState<double>::resting({1}, 0.5, 1.0), T::vector({1.0}));
  EXPECT_EQ(r.spikes[0], 0.0);
  EXPECT_EQ(r.state.u[0], 1.0);
}

TEST(Lif, ResetIsExactZeroRegardlessOfOvershoot) {
  auto r = lif_step(LIFState<double>::resting({3}, 1.0, 0.5), T::vector({0.51, 7.0, 1e6}));
  EXPECT_EQ(r.spikes, T::vector({1, 1, 1}));
  EXPECT_EQ(r.state.u, T(Shape{3}));
}

TEST(Lif, ValidatesParameters) {
  EXPECT_THROW(LIFState<double>::resting({1}, 0.0, 1.0), ConfigError);
  EXPECT_THROW(LIFState<double>::resting({1}, 1.5, 1.0), ConfigError);
  EXPECT_THROW(LIFState<double>::resting({1}, 0.5, 0.0), ConfigError);
  EXPECT_THROW(lif_step(LIFState<double>::resting({2}, 0.5, 1.0), T::vector({1})), ShapeError);
}

TEST(Lif, MatchesScalarOracle) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> n_dist(1, 64), t_dist(1, 8);
  std::uniform_real_distribution<double> tau_dist(0.05, 1.0), th_dist(0.1, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(n_dist(rng));
    const int steps = t_dist(rng);
    const double tau = tau_dist(rng), vth = th_dist(rng);
    std::vector<test::ScalarLif> oracle(n, test::ScalarLif{0, tau, vth});
    auto st = LIFState<double>::resting({n}, tau, vth);
    for (int t = 0; t < steps; ++t) {
      const T current = test::random_tensor({n}, rng, -0.5, 1.5);
      auto r = lif_step(st, current);
      for (std::size_t i = 0; i < n; ++i) {
        const auto [m, s] = oracle[i].step(current[i]);
        ASSERT_EQ(r.membrane[i], m);
        ASSERT_EQ(r.spikes[i], static_cast<double>(s));
        ASSERT_EQ(r.state.u[i], oracle[i].u);
      }
      st = r.state;
    }
  }
}

TEST(Lif, QuantizedMembraneTrace) {
  // Quantize u' each step at b = 8, then gate on the quantized value.
  const QuantSpec spec(8, QuantKind::kWeightMembrane);
  auto st = LIFState<double>::resting({2}, 0.5, 1.0);
  for (int t = 0; t < 3; ++t) {
    const T current = T::vector({0.6, 0.3});
    T m(Shape{2});
    for (std::size_t i = 0; i < 2; ++i) m[i] = st.tau_m * st.u[i] + current[i];
    const auto oracle_q = test::quant_oracle({m[0], m[1]}, 8);
    const T q = quantize(m, spec).q;
    for (std::size_t i = 0; i < 2; ++i) ASSERT_DOUBLE_EQ(q[i], oracle_q[i]);
    T next(Shape{2});
    for (std::size_t i = 0; i < 2; ++i) next[i] = q[i] > st.v_th ? 0.0 : q[i];
    st = LIFState<double>(next, 0.5, 1.0);
  }
  auto same = quantize_membrane_inline(st, QuantSpec(8, QuantKind::kWeightMembrane, false));
  EXPECT_EQ(same.u, st.u);
}

TEST(DirectCode, Replicates) {
  const T p = T::vector({0.1, 0.7});
  const auto seq = direct_code(p, 4);
  ASSERT_EQ(seq.size(), 4u);
  for (const auto& x : seq) EXPECT_EQ(x, p);
  EXPECT_EQ(direct_code(p, 1).size(), 1u);
  EXPECT_THROW(direct_code(p, 0), ConfigError);
  EXPECT_THROW(direct_code(T::vector({std::nan("")}), 2), NumericError);
}

namespace {

NetConfig small_net() {
  NetConfig c;
  c.height = c.width = 6;
  c.stem_width = 4;
  c.widths = {4, 6, 8};
  c.strides = {1, 2, 2};
  return c;
}

}  // namespace

TEST(Network, TapCountsPerGranularity) {
  ResidualNet<double> net(NetConfig{}, 0);
  EXPECT_EQ(net.tap_sites(Granularity::kConv).size(), 13u);
  EXPECT_EQ(net.tap_sites(Granularity::kBlock).size(), 6u);
  EXPECT_EQ(net.tap_sites(Granularity::kGroup).size(), 3u);
  EXPECT_THROW(parse_granularity("layer"), ConfigError);
}

TEST(Network, GroupTapsCaptureEveryTimestep) {
  ResidualNet<double> net(small_net(), 1);
  std::mt19937_64 rng(2);
  const T x = test::random_tensor({3, 1, 6, 6}, rng, 0, 2);
  auto run = run_network(net, x, 4, Granularity::kGroup);
  ASSERT_EQ(run.membranes.size(), 3u);
  for (const auto& tap : run.membranes) EXPECT_EQ(tap.size(), 4u);
  EXPECT_EQ(run.logits.shape(), (Shape{3, 4}));
  auto one = run_network(net, x, 1, Granularity::kBlock);
  ASSERT_EQ(one.membranes.size(), 6u);
  for (const auto& tap : one.membranes) EXPECT_EQ(tap.size(), 1u);
}

TEST(Network, SilentInputGivesNoSpikes) {
  ResidualNet<double> net(small_net(), 3);
  auto run = run_network(net, T(Shape{2, 1, 6, 6}), 4, Granularity::kConv);
  for (auto c : run.spike_counts) EXPECT_EQ(c, 0u);
}

TEST(Network, SpikesAreBinaryAndCaptureIsPreThreshold) {
  ResidualNet<double> net(small_net(), 4);
  std::mt19937_64 rng(5);
  const T x = test::random_tensor({2, 1, 6, 6}, rng, -1, 3);
  Tape<double> tape;
  ForwardOptions opt;
  opt.timesteps = 3;
  opt.taps = Granularity::kConv;
  opt.audit = true;
  opt.quant.membrane.enabled = true;
  auto pass = forward(tape, net, x, opt);
  ASSERT_EQ(pass.audit_log.size(), net.lif_sites().size() * 3);
  std::set<std::size_t> captured;
  for (const auto& tap : pass.membranes)
    for (const auto& v : tap) captured.insert(v.id);
  std::uint64_t total = 0;
  for (const auto& [m, s] : pass.audit_log) {
    EXPECT_TRUE(captured.count(m)) << "membrane node " << m << " not captured";
    EXPECT_LT(m, s);
    EXPECT_EQ(tape.op(Var<double>{&tape, s}), "spike");
    const auto& mv = tape.value(Var<double>{&tape, m});
    const auto& sv = tape.value(Var<double>{&tape, s});
    for (std::size_t i = 0; i < sv.size(); ++i) {
      ASSERT_TRUE(sv[i] == 0.0 || sv[i] == 1.0);
      ASSERT_EQ(sv[i] == 1.0, mv[i] > net.config().v_th);
      total += sv[i] == 1.0;
    }
  }
  std::uint64_t counted = 0;
  for (auto c : pass.spike_counts) counted += c;
  EXPECT_EQ(total, counted);
}

TEST(Network, InputShapeChecked) {
  ResidualNet<double> net(small_net(), 0);
  EXPECT_THROW(run_network(net, T(Shape{1, 1, 5, 6}), 2, Granularity::kGroup), ShapeError);
}

TEST(Network, FlopsPerTimestepFromMacs) {
  NetConfig c;
  c.height = c.width = 2;
  c.stem_width = 1;
  c.widths = {1};
  c.strides = {1};
  c.blocks_per_group = 1;
  c.num_classes = 2;
  ResidualNet<double> net(c, 0);
  // stem 4*9 + conv1 4*9 + conv2 4*9 + head 1*2 multiply-adds.
  EXPECT_DOUBLE_EQ(net.flops_per_timestep(), 3.0 * 2.0 * (3 * 36 + 2));
}

TEST(Network, TrainingGradientsReachEveryParameter) {
  ResidualNet<double> net(small_net(), 6);
  std::mt19937_64 rng(7);
  const T x = test::random_tensor({4, 1, 6, 6}, rng, 0, 3);
  Tape<double> tape;
  ForwardOptions opt;
  opt.training = true;
  opt.timesteps = 2;
  opt.quant.weight.enabled = opt.quant.membrane.enabled = opt.quant.bn.enabled = true;
  auto pass = forward(tape, net, x, opt);
  const std::vector<int> y{0, 1, 2, 3};
  tape.backward(cross_entropy(pass.logits, std::span<const int>(y)));
  std::size_t nonzero = 0;
  for (const auto& p : pass.params) nonzero += max_abs(tape.grad(p)) > 0;
  EXPECT_EQ(nonzero, pass.params.size());
}

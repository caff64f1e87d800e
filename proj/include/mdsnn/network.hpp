#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/lif.hpp"
#include "mdsnn/ops.hpp"
#include "mdsnn/quantization.hpp"
#include "mdsnn/surrogate.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

// Where membrane potentials are captured for distillation.
enum class Granularity { kConv, kBlock, kGroup };

inline Granularity parse_granularity(const std::string& s) {
  if (s == "conv") return Granularity::kConv;
  if (s == "block") return Granularity::kBlock;
  if (s == "group") return Granularity::kGroup;
  throw ConfigError("unknown tap granularity '" + s +
                    "' (expected conv, block or group)");
}

inline std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::kConv: return "conv";
    case Granularity::kBlock: return "block";
    case Granularity::kGroup: return "group";
  }
  return "?";
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct NetConfig {
  std::size_t in_channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t stem_width = 16;
  std::vector<std::size_t> widths{16, 32, 64};
  std::vector<std::size_t> strides{1, 2, 2};
  std::size_t blocks_per_group = 2;
  std::size_t num_classes = 4;
  double tau_m = 0.5;
  double v_th = 0.5;
  SurrogateSpec surrogate;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0 || stem_width == 0 ||
        num_classes < 2 || blocks_per_group == 0) {
      throw ConfigError("network dimensions must be positive (and >= 2 classes)");
    }
    if (widths.empty() || widths.size() != strides.size()) {
      throw ConfigError("model.widths and model.strides must be nonempty and "
                        "of equal length");
    }
    for (auto w : widths) {
      if (w == 0) throw ConfigError("group widths must be positive");
    }
    for (auto s : strides) {
      if (s == 0) throw ConfigError("group strides must be positive");
    }
    if (!(tau_m > 0 && tau_m <= 1)) throw ConfigError("model.tau_m must be in (0, 1]");
    if (!(v_th > 0)) throw ConfigError("model.v_th must be positive");
    if (!(bn_momentum > 0 && bn_momentum < 1)) {
      throw ConfigError("model.bn_momentum must be in (0, 1)");
    }
    if (!(bn_eps > 0)) throw ConfigError("model.bn_eps must be positive");
    if (!(surrogate.width > 0)) throw ConfigError("surrogate width must be positive");
  }

  // Canonical text identifying the parameter topology.
  std::string describe() const {
    std::ostringstream os;
    os << "in=" << in_channels << 'x' << height << 'x' << width
       << ";stem=" << stem_width << ";widths=";
    for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
    os << ";strides=";
    for (std::size_t i = 0; i < strides.size(); ++i) os << (i ? "," : "") << strides[i];
    os << ";blocks=" << blocks_per_group << ";classes=" << num_classes;
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a(describe()); }
};

// Which quantizers are active for a forward pass. All disabled = FP network.
struct NetQuant {
  QuantSpec weight{4, QuantKind::kWeightMembrane, false};
  QuantSpec membrane{4, QuantKind::kWeightMembrane, false};
  QuantSpec bn{8, QuantKind::kBatchNorm, false};

  bool any() const { return weight.enabled || membrane.enabled || bn.enabled; }
};

enum class ParamRole { kWeight, kBnScale, kBnShift, kBias };

template <typename Real = double>
struct Parameter {
  std::string name;
  ParamRole role;
  Tensor<Real> value;
};

struct ConvBnLayer {
  std::size_t weight, gamma, beta;  // parameter indices
  std::size_t stats;                // batch-norm statistics index
  std::size_t stride, pad;
};

struct ResidualBlock {
  ConvBnLayer conv1, conv2;
  std::optional<ConvBnLayer> shortcut;  // 1x1 projection when shape changes
  std::size_t lif1, lif2;               // LIF layer indices
};

// Static description of one LIF layer.
struct LifSite {
  std::string name;
  std::size_t group;      // 0 for the stem
  bool block_output;      // fires the block's output spikes
  bool group_output;      // last block of its group
  Shape shape;            // per-sample [C, H, W]
};

// Miniature spiking residual network: conv-BN-LIF stem, groups of residual
// blocks, and an analog linear head averaged over timesteps.
//
// Each block computes
//   h   = LIF1(BN1(conv1(s)))
//   out = LIF2(BN2(conv2(h)) + shortcut(s))
// with an identity shortcut unless the stride or width changes.
template <typename Real = double>
class ResidualNet {
 public:
  ResidualNet(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::size_t h = cfg_.height, w = cfg_.width;
    stem_ = add_conv_bn("stem", cfg_.in_channels, cfg_.stem_width, 3, 1, rng);
    lif_sites_.push_back({"stem.lif", 0, false, false, Shape{cfg_.stem_width, h, w}});
    std::size_t c = cfg_.stem_width;
    for (std::size_t g = 0; g < cfg_.widths.size(); ++g) {
      for (std::size_t b = 0; b < cfg_.blocks_per_group; ++b) {
        const std::string p = "g" + std::to_string(g) + ".b" + std::to_string(b);
        const std::size_t stride = b == 0 ? cfg_.strides[g] : 1;
        const std::size_t out_c = cfg_.widths[g];
        h = (h + 2 - 3) / stride + 1;
        w = (w + 2 - 3) / stride + 1;
        ResidualBlock blk{};
        blk.conv1 = add_conv_bn(p + ".conv1", c, out_c, 3, stride, rng);
        blk.conv2 = add_conv_bn(p + ".conv2", out_c, out_c, 3, 1, rng);
        if (stride != 1 || c != out_c) {
          blk.shortcut = add_conv_bn(p + ".shortcut", c, out_c, 1, stride, rng);
        }
        blk.lif1 = lif_sites_.size();
        lif_sites_.push_back({p + ".lif1", g + 1, false, false, Shape{out_c, h, w}});
        blk.lif2 = lif_sites_.size();
        lif_sites_.push_back({p + ".lif2", g + 1, true,
                              b + 1 == cfg_.blocks_per_group, Shape{out_c, h, w}});
        blocks_.push_back(blk);
        c = out_c;
      }
    }
    head_features_ = c;
    head_weight_ = params_.size();
    params_.push_back({"head.weight", ParamRole::kWeight,
                       normal_tensor(Shape{cfg_.num_classes, c},
                                     std::sqrt(1.0 / static_cast<double>(c)), rng)});
    head_bias_ = params_.size();
    params_.push_back({"head.bias", ParamRole::kBias, Tensor<Real>(Shape{cfg_.num_classes})});
  }

  const NetConfig& config() const { return cfg_; }
  std::vector<Parameter<Real>>& params() { return params_; }
  const std::vector<Parameter<Real>>& params() const { return params_; }
  std::vector<BatchNormStats<Real>>& bn_stats() { return bn_stats_; }
  const std::vector<BatchNormStats<Real>>& bn_stats() const { return bn_stats_; }
  const std::vector<std::string>& bn_names() const { return bn_names_; }
  const std::vector<LifSite>& lif_sites() const { return lif_sites_; }
  const std::vector<ResidualBlock>& blocks() const { return blocks_; }
  const ConvBnLayer& stem() const { return stem_; }
  std::size_t head_weight() const { return head_weight_; }
  std::size_t head_bias() const { return head_bias_; }
  std::size_t num_groups() const { return cfg_.widths.size(); }

  // LIF layer indices whose membranes are captured at granularity g.
  std::vector<std::size_t> tap_sites(Granularity g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < lif_sites_.size(); ++i) {
      const auto& s = lif_sites_[i];
      if (g == Granularity::kConv ||
          (g == Granularity::kBlock && s.block_output) ||
          (g == Granularity::kGroup && s.group_output)) {
        out.push_back(i);
      }
    }
    return out;
  }

  // Forward+backward FLOPs for one sample and one timestep. Multiply-adds
  // count as two FLOPs and the backward pass as twice the forward.
  double flops_per_timestep() const {
    double macs = 0;
    auto conv_macs = [&](const ConvBnLayer& l, const Shape& out_chw) {
      const auto& w = params_[l.weight].value.shape();
      macs += static_cast<double>(numel(out_chw) * w[1] * w[2] * w[3]);
    };
    conv_macs(stem_, lif_sites_[0].shape);
    for (const auto& blk : blocks_) {
      conv_macs(blk.conv1, lif_sites_[blk.lif1].shape);
      conv_macs(blk.conv2, lif_sites_[blk.lif2].shape);
      if (blk.shortcut) conv_macs(*blk.shortcut, lif_sites_[blk.lif2].shape);
    }
    macs += static_cast<double>(head_features_ * cfg_.num_classes);
    return 3.0 * 2.0 * macs;
  }

  // Hash of every parameter and running statistic, bit-level.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const auto& t) {
      for (auto v : t.data()) {
        const double d = static_cast<double>(v);
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        h = (h ^ bits) * 1099511628211ull;
      }
    };
    for (const auto& p : params_) mix(p.value);
    for (const auto& s : bn_stats_) {
      mix(s.mean);
      mix(s.var);
    }
    return h;
  }

 private:
  ConvBnLayer add_conv_bn(const std::string& prefix, std::size_t in_c,
                          std::size_t out_c, std::size_t k, std::size_t stride,
                          std::mt19937_64& rng) {
    ConvBnLayer l{};
    l.stride = stride;
    l.pad = k / 2;
    l.weight = params_.size();
    const double fan_in = static_cast<double>(in_c * k * k);
    params_.push_back({prefix + ".weight", ParamRole::kWeight,
                       normal_tensor(Shape{out_c, in_c, k, k},
                                     std::sqrt(2.0 / fan_in), rng)});
    l.gamma = params_.size();
    params_.push_back({prefix + ".bn.gamma", ParamRole::kBnScale,
                       Tensor<Real>(Shape{out_c}, Real(1))});
    l.beta = params_.size();
    params_.push_back({prefix + ".bn.beta", ParamRole::kBnShift,
                       Tensor<Real>(Shape{out_c})});
    l.stats = bn_stats_.size();
    bn_stats_.emplace_back(out_c);
    bn_names_.push_back(prefix + ".bn");
    return l;
  }

  static Tensor<Real> normal_tensor(Shape shape, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, sd);
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<Real>(dist(rng));
    return t;
  }

  NetConfig cfg_;
  std::vector<Parameter<Real>> params_;
  std::vector<BatchNormStats<Real>> bn_stats_;
  std::vector<std::string> bn_names_;
  std::vector<LifSite> lif_sites_;
  std::vector<ResidualBlock> blocks_;
  ConvBnLayer stem_{};
  std::size_t head_weight_ = 0, head_bias_ = 0, head_features_ = 0;
};

// Direct coding: the analog image is the input current at every timestep.
template <typename Real>
std::vector<Tensor<Real>> direct_code(const Tensor<Real>& pixels, int timesteps) {
  if (timesteps < 1) {
    throw ConfigError("timesteps must be >= 1, got " + std::to_string(timesteps));
  }
  if (!pixels.all_finite()) throw NumericError("direct_code: non-finite pixel");
  return std::vector<Tensor<Real>>(static_cast<std::size_t>(timesteps), pixels);
}

struct ForwardOptions {
  int timesteps = 4;
  bool training = false;
  NetQuant quant;
  Granularity taps = Granularity::kGroup;
  bool capture = true;
  // Records (membrane node, spike node) id pairs for every LIF evaluation.
  bool audit = false;
};

template <typename Real = double>
struct ForwardPass {
  Var<Real> logits;
  std::vector<std::size_t> tap_sites;              // LIF layer per tap
  std::vector<std::vector<Var<Real>>> membranes;   // [tap][timestep]
  std::vector<std::uint64_t> spike_counts;         // per LIF layer
  std::vector<Var<Real>> params;                   // leaves, same order as net
  std::vector<std::pair<std::size_t, std::size_t>> audit_log;
};

// Unrolls the network for opt.timesteps steps on `tape`. In training mode the
// parameters are gradient-requiring leaves and batch-norm running statistics
// are updated; otherwise the pass records no backward rules.
template <typename Real>
ForwardPass<Real> forward(Tape<Real>& tape, ResidualNet<Real>& net,
                          const Tensor<Real>& batch, const ForwardOptions& opt) {
  const NetConfig& cfg = net.config();
  if (batch.rank() != 4 || batch.dim(1) != cfg.in_channels ||
      batch.dim(2) != cfg.height || batch.dim(3) != cfg.width) {
    throw ShapeError("network input must be [N, " + std::to_string(cfg.in_channels) +
                     ", " + std::to_string(cfg.height) + ", " +
                     std::to_string(cfg.width) + "], got " + to_string(batch.shape()));
  }
  const auto inputs = direct_code(batch, opt.timesteps);
  ForwardPass<Real> out;

  for (const auto& p : net.params()) {
    out.params.push_back(tape.leaf(p.value, opt.training, p.name));
  }
  // Effective (possibly quantized) parameters, computed once per pass.
  std::vector<Var<Real>> eff(out.params.size());
  for (std::size_t i = 0; i < eff.size(); ++i) {
    switch (net.params()[i].role) {
      case ParamRole::kWeight:
        eff[i] = ste_quantize(out.params[i], opt.quant.weight);
        break;
      case ParamRole::kBnScale:
      case ParamRole::kBnShift:
        eff[i] = ste_quantize_bn(out.params[i], opt.quant.bn);
        break;
      case ParamRole::kBias:
        eff[i] = out.params[i];
        break;
    }
  }

  const auto& sites = net.lif_sites();
  out.spike_counts.assign(sites.size(), 0);
  std::vector<int> tap_of_site(sites.size(), -1);
  if (opt.capture) {
    out.tap_sites = net.tap_sites(opt.taps);
    out.membranes.resize(out.tap_sites.size());
    for (std::size_t i = 0; i < out.tap_sites.size(); ++i) {
      tap_of_site[out.tap_sites[i]] = static_cast<int>(i);
    }
  }
  std::vector<std::optional<Var<Real>>> potential(sites.size());
  std::vector<Tensor<Real>> leak_mask(sites.size());
  const Real tau = static_cast<Real>(cfg.tau_m);
  const Real v_th = static_cast<Real>(cfg.v_th);
  const BatchNormOptions bn_opt{opt.training, cfg.bn_momentum, cfg.bn_eps};

  auto conv_bn = [&](const Var<Real>& x, const ConvBnLayer& l) {
    Var<Real> y = conv2d(x, eff[l.weight], l.stride, l.pad);
    return batch_norm(y, eff[l.gamma], eff[l.beta], net.bn_stats()[l.stats], bn_opt);
  };

  // u' = tau * u * (1 - s_prev) + I, the reset gate held constant.
  auto lif = [&](std::size_t site, const Var<Real>& current) {
    Var<Real> u = potential[site]
                      ? add(mul_const(*potential[site], leak_mask[site]), current)
                      : current;
    u = ste_quantize(u, opt.quant.membrane);
    if (tap_of_site[site] >= 0) {
      out.membranes[static_cast<std::size_t>(tap_of_site[site])].push_back(u);
    }
    Var<Real> s = spike(u, v_th, cfg.surrogate);
    if (opt.audit) out.audit_log.emplace_back(u.id, s.id);
    Tensor<Real> mask(s.shape());
    std::uint64_t fired = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const bool f = s.value()[i] > Real(0);
      fired += f ? 1 : 0;
      mask[i] = f ? Real(0) : tau;
    }
    out.spike_counts[site] += fired;
    potential[site] = u;
    leak_mask[site] = std::move(mask);
    return s;
  };

  std::optional<Var<Real>> logit_sum;
  for (int t = 0; t < opt.timesteps; ++t) {
    Var<Real> x = tape.constant(inputs[static_cast<std::size_t>(t)], "input");
    Var<Real> s = lif(0, conv_bn(x, net.stem()));
    for (const auto& blk : net.blocks()) {
      Var<Real> h = lif(blk.lif1, conv_bn(s, blk.conv1));
      Var<Real> y = conv_bn(h, blk.conv2);
      Var<Real> shortcut = blk.shortcut ? conv_bn(s, *blk.shortcut) : s;
      s = lif(blk.lif2, add(y, shortcut));
    }
    const Var<Real>& bias = eff[net.head_bias()];
    Var<Real> z = linear(global_avg_pool(s), eff[net.head_weight()], &bias);
    logit_sum = logit_sum ? add(*logit_sum, z) : z;
  }
  out.logits = scale(*logit_sum, Real(1) / static_cast<Real>(opt.timesteps));
  return out;
}

// Plain-tensor results of an evaluation-mode pass.
template <typename Real = double>
struct NetworkRun {
  Tensor<Real> logits;
  std::vector<std::size_t> tap_sites;
  std::vector<std::vector<Tensor<Real>>> membranes;  // [tap][timestep]
  std::vector<std::uint64_t> spike_counts;
};

template <typename Real>
NetworkRun<Real> run_network(ResidualNet<Real>& net, const Tensor<Real>& batch,
                             int timesteps, Granularity taps,
                             const NetQuant& quant = {}) {
  Tape<Real> tape;
  ForwardOptions opt;
  opt.timesteps = timesteps;
  opt.training = false;
  opt.quant = quant;
  opt.taps = taps;
  ForwardPass<Real> pass = forward(tape, net, batch, opt);
  NetworkRun<Real> run;
  run.logits = pass.logits.value();
  run.tap_sites = pass.tap_sites;
  run.spike_counts = pass.spike_counts;
  for (const auto& per_tap : pass.membranes) {
    auto& dst = run.membranes.emplace_back();
    for (const auto& v : per_tap) dst.push_back(v.value());
  }
  return run;
}

}  // namespace mdsnn

#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mdsnn/distillation.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/quantization.hpp"

namespace mdsnn {

enum class Role { kTeacher, kStudent, kBaseline };

inline Role parse_role(const std::string& s) {
  if (s == "teacher") return Role::kTeacher;
  if (s == "student") return Role::kStudent;
  if (s == "baseline") return Role::kBaseline;
  throw ConfigError("unknown role '" + s + "' (expected teacher, student or baseline)");
}

inline std::string to_string(Role r) {
  switch (r) {
    case Role::kTeacher: return "teacher";
    case Role::kStudent: return "student";
    case Role::kBaseline: return "baseline";
  }
  return "?";
}

// A student that distills needs a teacher; kept apart from ConfigError so
// the CLI can report it with its own exit code.
class MissingTeacherError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct OptimConfig {
  double lr = 0;  // 0 selects the role default
  double momentum = 0.9;
  double weight_decay = 1e-4;

  double effective_lr(Role role) const {
    if (lr > 0) return lr;
    return role == Role::kTeacher ? 0.1 : 0.05;
  }
};

struct DataConfig {
  std::string source = "synth";  // synth | idx
  std::size_t num_classes = 4;
  std::size_t train_per_class = 32;
  std::size_t test_per_class = 64;
  double noise = 0.3;
  double sigma = 1.2;
  double amplitude = 1.0;
  std::uint64_t seed = 1;
  bool standardize = true;
  std::string train_images, train_labels, test_images, test_labels;
};

struct RunConfig {
  Role role = Role::kStudent;
  int timesteps = 4;          // t for students, T for teachers
  int teacher_timesteps = 4;  // T of the guiding teacher
  std::vector<int> students{1, 2, 3, 4};
  int epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string teacher_checkpoint;
  std::size_t hist_bins = 100;

  NetConfig model;
  NetQuant quant{QuantSpec(4, QuantKind::kWeightMembrane, true),
                 QuantSpec(4, QuantKind::kWeightMembrane, true),
                 QuantSpec(8, QuantKind::kBatchNorm, true)};
  DistillConfig distill;
  OptimConfig optim;
  DataConfig data;

  bool needs_teacher() const { return role == Role::kStudent && distill.distills(); }

  // Applies role rules: teachers train in full precision without a teacher,
  // baselines train quantized without distillation.
  void normalize() {
    if (role == Role::kTeacher) {
      quant.weight.enabled = quant.membrane.enabled = quant.bn.enabled = false;
      distill.beta_logit = distill.gamma_mem = 0;
      teacher_timesteps = timesteps;
    } else if (role == Role::kBaseline) {
      distill.beta_logit = distill.gamma_mem = 0;
    }
    model.num_classes = data.num_classes;
  }

  // `require_teacher` = false defers the teacher check to callers that
  // train their own teacher first.
  void validate(bool require_teacher = true) const {
    model.validate();
    quant.weight.validate();
    quant.membrane.validate();
    quant.bn.validate();
    distill.validate();
    if (timesteps < 1) throw ConfigError("run.timesteps must be >= 1");
    if (teacher_timesteps < 1) throw ConfigError("run.teacher_timesteps must be >= 1");
    for (int t : students) {
      if (t < 1 || t > teacher_timesteps) {
        throw ConfigError("run.students entry " + std::to_string(t) +
                          " outside [1, " + std::to_string(teacher_timesteps) + "]");
      }
    }
    if (role == Role::kStudent && timesteps > teacher_timesteps) {
      throw ConfigError("student timesteps t=" + std::to_string(timesteps) +
                        " exceed teacher timesteps T=" + std::to_string(teacher_timesteps));
    }
    if (epochs < 0) throw ConfigError("run.epochs must be >= 0");
    if (batch_size == 0) throw ConfigError("run.batch_size must be >= 1");
    if (precision != "f64" && precision != "f32") {
      throw ConfigError("run.precision must be f64 or f32");
    }
    if (hist_bins < 2) throw ConfigError("run.hist_bins must be >= 2");
    if (optim.lr < 0) throw ConfigError("optim.lr must be >= 0");
    if (optim.momentum < 0 || optim.momentum >= 1) {
      throw ConfigError("optim.momentum must be in [0, 1)");
    }
    if (optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
    if (data.source != "synth" && data.source != "idx") {
      throw ConfigError("data.source must be synth or idx");
    }
    if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
    if (data.source == "synth" && (data.train_per_class == 0 || data.test_per_class == 0)) {
      throw ConfigError("data.train_per_class and data.test_per_class must be positive");
    }
    if (require_teacher && needs_teacher() && teacher_checkpoint.empty()) {
      throw MissingTeacherError(
          "student distillation needs run.teacher_checkpoint (distill weights "
          "beta_logit/gamma_mem are nonzero)");
    }
  }
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> split_ints(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + item + "' is not an integer");
    }
  }
  return out;
}

// Shortest text that reads back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

using boost::property_tree::ptree;

// Canonical tree of every configurable key.
inline ptree to_ptree(const RunConfig& c) {
  ptree t;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto d = detail::fmt_double;
  t.put("run.role", to_string(c.role));
  t.put("run.timesteps", c.timesteps);
  t.put("run.teacher_timesteps", c.teacher_timesteps);
  t.put("run.students", detail::join_ints(c.students));
  t.put("run.epochs", c.epochs);
  t.put("run.batch_size", c.batch_size);
  t.put("run.seed", c.seed);
  t.put("run.precision", c.precision);
  t.put("run.teacher_checkpoint", c.teacher_checkpoint);
  t.put("run.hist_bins", c.hist_bins);

  t.put("model.in_channels", c.model.in_channels);
  t.put("model.height", c.model.height);
  t.put("model.width", c.model.width);
  t.put("model.stem_width", c.model.stem_width);
  std::vector<int> widths(c.model.widths.begin(), c.model.widths.end());
  std::vector<int> strides(c.model.strides.begin(), c.model.strides.end());
  t.put("model.widths", detail::join_ints(widths));
  t.put("model.strides", detail::join_ints(strides));
  t.put("model.blocks_per_group", c.model.blocks_per_group);
  t.put("model.tau_m", d(c.model.tau_m));
  t.put("model.v_th", d(c.model.v_th));
  t.put("model.surrogate", to_string(c.model.surrogate.kind));
  t.put("model.surrogate_width", d(c.model.surrogate.width));
  t.put("model.bn_momentum", d(c.model.bn_momentum));
  t.put("model.bn_eps", d(c.model.bn_eps));

  t.put("quant.weight", b(c.quant.weight.enabled));
  t.put("quant.weight_bits", c.quant.weight.bits);
  t.put("quant.membrane", b(c.quant.membrane.enabled));
  t.put("quant.membrane_bits", c.quant.membrane.bits);
  t.put("quant.bn", b(c.quant.bn.enabled));
  t.put("quant.bn_bits", c.quant.bn.bits);

  t.put("distill.alpha_ce", d(c.distill.alpha_ce));
  t.put("distill.beta_logit", d(c.distill.beta_logit));
  t.put("distill.gamma_mem", d(c.distill.gamma_mem));
  t.put("distill.logit_tau_a", d(c.distill.logit_tau_a));
  t.put("distill.logit_tau_b", d(c.distill.logit_tau_b));
  t.put("distill.mem_tau_a", d(c.distill.mem_tau_a));
  t.put("distill.mem_tau_b", d(c.distill.mem_tau_b));
  t.put("distill.granularity", to_string(c.distill.granularity));
  t.put("distill.membrane_loss", to_string(c.distill.membrane_loss));

  t.put("optim.kind", "sgd");
  t.put("optim.lr", d(c.optim.lr));
  t.put("optim.momentum", d(c.optim.momentum));
  t.put("optim.weight_decay", d(c.optim.weight_decay));

  t.put("data.source", c.data.source);
  t.put("data.num_classes", c.data.num_classes);
  t.put("data.train_per_class", c.data.train_per_class);
  t.put("data.test_per_class", c.data.test_per_class);
  t.put("data.noise", d(c.data.noise));
  t.put("data.sigma", d(c.data.sigma));
  t.put("data.amplitude", d(c.data.amplitude));
  t.put("data.seed", c.data.seed);
  t.put("data.standardize", b(c.data.standardize));
  t.put("data.train_images", c.data.train_images);
  t.put("data.train_labels", c.data.train_labels);
  t.put("data.test_images", c.data.test_images);
  t.put("data.test_labels", c.data.test_labels);
  return t;
}

namespace detail {

template <typename T>
T get_value(const ptree& t, const std::string& key) {
  const auto& raw = t.get<std::string>(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (raw == "true" || raw == "1") return true;
      if (raw == "false" || raw == "0") return false;
      throw std::invalid_argument(raw);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return raw;
    } else if constexpr (std::is_floating_point_v<T>) {
      std::size_t used = 0;
      const double v = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return static_cast<T>(v);
    } else if constexpr (std::is_unsigned_v<T>) {
      std::size_t used = 0;
      if (!raw.empty() && raw[0] == '-') throw std::invalid_argument(raw);
      const auto v = std::stoull(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return static_cast<T>(v);
    } else {
      std::size_t used = 0;
      const auto v = std::stoll(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return static_cast<T>(v);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("invalid value '" + raw + "' for " + key);
  }
}

}  // namespace detail

// Reads every schema key from `t`; keys missing from `t` keep their defaults
// and unknown keys are rejected.
inline RunConfig from_ptree(const ptree& t) {
  const ptree schema = to_ptree(RunConfig{});
  for (const auto& [section, body] : t) {
    if (!schema.get_child_optional(section) || body.empty()) {
      throw ConfigError("unknown config section '" + section + "'");
    }
    for (const auto& [key, _] : body) {
      if (!schema.get_child(section).get_child_optional(key)) {
        throw ConfigError("unknown config key '" + section + "." + key + "'");
      }
    }
  }
  ptree merged = schema;
  for (const auto& [section, body] : t) {
    for (const auto& [key, value] : body) merged.put(section + "." + key, value.data());
  }
  using detail::get_value;
  RunConfig c;
  c.role = parse_role(get_value<std::string>(merged, "run.role"));
  c.timesteps = get_value<int>(merged, "run.timesteps");
  c.teacher_timesteps = get_value<int>(merged, "run.teacher_timesteps");
  c.students = detail::split_ints(get_value<std::string>(merged, "run.students"), "run.students");
  c.epochs = get_value<int>(merged, "run.epochs");
  c.batch_size = get_value<std::size_t>(merged, "run.batch_size");
  c.seed = get_value<std::uint64_t>(merged, "run.seed");
  c.precision = get_value<std::string>(merged, "run.precision");
  c.teacher_checkpoint = get_value<std::string>(merged, "run.teacher_checkpoint");
  c.hist_bins = get_value<std::size_t>(merged, "run.hist_bins");

  c.model.in_channels = get_value<std::size_t>(merged, "model.in_channels");
  c.model.height = get_value<std::size_t>(merged, "model.height");
  c.model.width = get_value<std::size_t>(merged, "model.width");
  c.model.stem_width = get_value<std::size_t>(merged, "model.stem_width");
  auto sizes = [&](const std::string& key) {
    std::vector<std::size_t> out;
    for (int v : detail::split_ints(get_value<std::string>(merged, key), key)) {
      if (v < 1) throw ConfigError(key + " entries must be positive");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  };
  c.model.widths = sizes("model.widths");
  c.model.strides = sizes("model.strides");
  c.model.blocks_per_group = get_value<std::size_t>(merged, "model.blocks_per_group");
  c.model.tau_m = get_value<double>(merged, "model.tau_m");
  c.model.v_th = get_value<double>(merged, "model.v_th");
  c.model.surrogate.kind = parse_surrogate_kind(get_value<std::string>(merged, "model.surrogate"));
  c.model.surrogate.width = get_value<double>(merged, "model.surrogate_width");
  c.model.bn_momentum = get_value<double>(merged, "model.bn_momentum");
  c.model.bn_eps = get_value<double>(merged, "model.bn_eps");

  c.quant.weight.enabled = get_value<bool>(merged, "quant.weight");
  c.quant.weight.bits = get_value<int>(merged, "quant.weight_bits");
  c.quant.membrane.enabled = get_value<bool>(merged, "quant.membrane");
  c.quant.membrane.bits = get_value<int>(merged, "quant.membrane_bits");
  c.quant.bn.enabled = get_value<bool>(merged, "quant.bn");
  c.quant.bn.bits = get_value<int>(merged, "quant.bn_bits");

  c.distill.alpha_ce = get_value<double>(merged, "distill.alpha_ce");
  c.distill.beta_logit = get_value<double>(merged, "distill.beta_logit");
  c.distill.gamma_mem = get_value<double>(merged, "distill.gamma_mem");
  c.distill.logit_tau_a = get_value<double>(merged, "distill.logit_tau_a");
  c.distill.logit_tau_b = get_value<double>(merged, "distill.logit_tau_b");
  c.distill.mem_tau_a = get_value<double>(merged, "distill.mem_tau_a");
  c.distill.mem_tau_b = get_value<double>(merged, "distill.mem_tau_b");
  c.distill.granularity = parse_granularity(get_value<std::string>(merged, "distill.granularity"));
  c.distill.membrane_loss =
      parse_membrane_loss(get_value<std::string>(merged, "distill.membrane_loss"));

  if (get_value<std::string>(merged, "optim.kind") != "sgd") {
    throw ConfigError("optim.kind: only sgd is supported");
  }
  c.optim.lr = get_value<double>(merged, "optim.lr");
  c.optim.momentum = get_value<double>(merged, "optim.momentum");
  c.optim.weight_decay = get_value<double>(merged, "optim.weight_decay");

  c.data.source = get_value<std::string>(merged, "data.source");
  c.data.num_classes = get_value<std::size_t>(merged, "data.num_classes");
  c.data.train_per_class = get_value<std::size_t>(merged, "data.train_per_class");
  c.data.test_per_class = get_value<std::size_t>(merged, "data.test_per_class");
  c.data.noise = get_value<double>(merged, "data.noise");
  c.data.sigma = get_value<double>(merged, "data.sigma");
  c.data.amplitude = get_value<double>(merged, "data.amplitude");
  c.data.seed = get_value<std::uint64_t>(merged, "data.seed");
  c.data.standardize = get_value<bool>(merged, "data.standardize");
  c.data.train_images = get_value<std::string>(merged, "data.train_images");
  c.data.train_labels = get_value<std::string>(merged, "data.train_labels");
  c.data.test_images = get_value<std::string>(merged, "data.test_images");
  c.data.test_labels = get_value<std::string>(merged, "data.test_labels");
  return c;
}

// "section.key=value" applied on top of `t`.
inline void apply_override(ptree& t, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 ||
      dot + 1 == eq) {
    throw ConfigError("override '" + assignment + "' is not section.key=value");
  }
  t.put(assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline ptree read_ini_text(const std::string& text) {
  ptree t;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return t;
}

inline ptree read_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return read_ini_text(ss.str());
}

// Defaults, then the optional file, then overrides; normalized and validated.
inline RunConfig resolve_config(const ptree& file, const std::vector<std::string>& overrides,
                                bool require_teacher = true) {
  ptree t = file;
  for (const auto& o : overrides) apply_override(t, o);
  RunConfig c = from_ptree(t);
  c.normalize();
  c.validate(require_teacher);
  return c;
}

inline std::string to_ini(const RunConfig& c) {
  std::ostringstream out;
  boost::property_tree::ini_parser::write_ini(out, to_ptree(c));
  return out.str();
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(to_ini(c))));
  return buf;
}

}  // namespace mdsnn

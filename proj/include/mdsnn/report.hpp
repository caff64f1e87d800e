#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mdsnn/error.hpp"
#include "mdsnn/flops.hpp"
#include "mdsnn/metrics.hpp"
#include "mdsnn/trainer.hpp"

// JSON views of training and evaluation results. Nothing here carries wall
// time, so reruns produce identical bytes.
namespace mdsnn {

using nlohmann::json;

inline json to_json(const EpochRecord& r) {
  return json{{"epoch", r.epoch},         {"lr", r.lr},
              {"loss", r.loss},           {"ce", r.ce},
              {"logit", r.logit},         {"mem", r.mem},
              {"train_acc", r.train_acc}, {"test_acc", r.test_acc},
              {"sparsity", r.sparsity},   {"layer_sparsity", r.layer_sparsity}};
}

inline EpochRecord epoch_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.loss = j.at("loss").get<double>();
  r.ce = j.at("ce").get<double>();
  r.logit = j.at("logit").get<double>();
  r.mem = j.at("mem").get<double>();
  r.train_acc = j.at("train_acc").get<double>();
  r.test_acc = j.at("test_acc").get<double>();
  r.sparsity = j.at("sparsity").get<double>();
  r.layer_sparsity = j.at("layer_sparsity").get<std::vector<double>>();
  return r;
}

inline json to_json(const SparsityReport& s) {
  return json{{"network", s.network},
              {"layer", s.layer},
              {"total_spikes", s.total_spikes},
              {"total_neuron_steps", s.total_neuron_steps}};
}

template <typename Real>
json eval_summary(const EvalResult<Real>& e) {
  return json{{"accuracy", e.accuracy},
              {"correct", e.correct},
              {"total", e.total},
              {"sparsity", to_json(e.sparsity)}};
}

inline json to_json(const MembraneHistogram& h) {
  return json{{"tap", h.tap},     {"timestep", h.timestep}, {"edges", h.edges},
              {"counts", h.counts}, {"v_th", h.v_th},        {"total", h.total()}};
}

inline json to_json(const FlopsReport& r) {
  return json{{"versatile_flops", r.versatile_flops},
              {"traditional_flops", r.traditional_flops},
              {"reduction", r.reduction},
              {"reduction_percent", r.reduction_percent},
              {"versatile_trainings", r.versatile_trainings},
              {"traditional_trainings", r.traditional_trainings}};
}

// Newline-delimited JSON, flushed after every record.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : out_(path, std::ios::trunc), path_(path) {
    if (!out_) throw Error("cannot write " + path);
  }

  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw Error("write failed for " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace mdsnn

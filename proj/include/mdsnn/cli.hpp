#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdsnn/checkpoint.hpp"
#include "mdsnn/config.hpp"
#include "mdsnn/data.hpp"
#include "mdsnn/error.hpp"
#include "mdsnn/flops.hpp"
#include "mdsnn/report.hpp"
#include "mdsnn/trainer.hpp"

namespace mdsnn::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingTeacher = 4,
  kCheckpoint = 5,
  kData = 6,
  kDiverged = 7,
};

struct Options {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "runs";
  std::optional<std::uint64_t> seed;
  std::string checkpoint;           // eval
  std::string teacher, student;     // export-hist
  std::optional<int> teacher_timesteps;
  std::string students;             // versatile, "1,2,3,4"
};

inline std::vector<std::string> overrides(const Options& o, std::optional<Role> role) {
  std::vector<std::string> ov = o.sets;
  if (o.seed) ov.push_back("run.seed=" + std::to_string(*o.seed));
  if (o.teacher_timesteps) ov.push_back("run.teacher_timesteps=" + std::to_string(*o.teacher_timesteps));
  if (!o.students.empty()) ov.push_back("run.students=" + o.students);
  // The versatile schedule takes its student steps from run.students, so
  // run.timesteps follows the teacher.
  if (o.command == "versatile" && o.teacher_timesteps) {
    ov.push_back("run.timesteps=" + std::to_string(*o.teacher_timesteps));
  }
  if (role) ov.push_back("run.role=" + to_string(*role));
  return ov;
}

inline ptree config_file(const Options& o) {
  return o.config_path.empty() ? ptree{} : read_ini_file(o.config_path);
}

inline RunConfig build_config(const Options& o, std::optional<Role> role,
                              bool require_teacher = true) {
  return resolve_config(config_file(o), overrides(o, role), require_teacher);
}

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return os.str();
}

// <out>/<config hash>-<UTC timestamp>, suffixed if the name is taken.
inline fs::path make_run_dir(const std::string& out, const RunConfig& cfg) {
  const std::string base = config_hash(cfg) + "-" + utc_stamp();
  fs::path dir = fs::path(out) / base;
  for (int k = 1; fs::exists(dir); ++k) dir = fs::path(out) / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

inline void write_config(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.ini", std::ios::trunc);
  if (!out) throw Error("cannot write " + (dir / "config.ini").string());
  out << to_ini(cfg);
}

inline std::map<std::string, std::string> checkpoint_meta(const RunConfig& cfg) {
  return {{"role", to_string(cfg.role)},
          {"seed", std::to_string(cfg.seed)},
          {"epoch", std::to_string(cfg.epochs)},
          {"config_hash", config_hash(cfg)},
          {"timesteps", std::to_string(cfg.timesteps)},
          {"precision", cfg.precision}};
}

template <typename Real>
ResidualNet<Real> load_net(const RunConfig& cfg, const std::string& path) {
  ResidualNet<Real> net(cfg.model, 0);
  restore(net, load_checkpoint(path));
  return net;
}

// The teacher named by run.teacher_checkpoint, checked against T.
template <typename Real>
ResidualNet<Real> load_teacher(const RunConfig& cfg) {
  if (cfg.teacher_checkpoint.empty()) {
    throw MissingTeacherError("no teacher checkpoint given (set run.teacher_checkpoint)");
  }
  if (!fs::exists(cfg.teacher_checkpoint)) {
    throw MissingTeacherError("teacher checkpoint not found: " + cfg.teacher_checkpoint);
  }
  const Checkpoint ck = load_checkpoint(cfg.teacher_checkpoint);
  if (auto it = ck.meta.find("role"); it != ck.meta.end() && it->second != "teacher") {
    throw ConfigError("checkpoint " + cfg.teacher_checkpoint + " holds a " + it->second +
                      ", not a teacher");
  }
  if (auto it = ck.meta.find("timesteps");
      it != ck.meta.end() && it->second != std::to_string(cfg.teacher_timesteps)) {
    throw ConfigError("teacher checkpoint was trained with T=" + it->second +
                      " but run.teacher_timesteps=" + std::to_string(cfg.teacher_timesteps));
  }
  ResidualNet<Real> net(cfg.model, 0);
  restore(net, ck);
  return net;
}

// Trains one network into `dir`: config.ini, metrics.jsonl, model.ckpt, eval.json.
template <typename Real>
TrainResult<Real> train_into(const fs::path& dir, const RunConfig& cfg,
                             const DataSplits<Real>& data, ResidualNet<Real>* teacher) {
  write_config(dir, cfg);
  JsonlWriter metrics((dir / "metrics.jsonl").string());
  TrainResult<Real> r =
      train(cfg, data, teacher, [&metrics](const EpochRecord& e) { metrics.write(to_json(e)); });
  save_checkpoint((dir / "model.ckpt").string(), to_checkpoint(r.net, checkpoint_meta(cfg)));
  write_json((dir / "eval.json").string(), eval_summary(r.final_eval));
  return r;
}

inline RunConfig teacher_config(const RunConfig& cfg) {
  RunConfig t = cfg;
  t.role = Role::kTeacher;
  t.timesteps = cfg.teacher_timesteps;
  t.teacher_checkpoint.clear();
  t.normalize();
  t.validate();
  return t;
}

// Loads the configured teacher, or trains one into <dir>/teacher.
template <typename Real>
ResidualNet<Real> obtain_teacher(const fs::path& dir, RunConfig& cfg,
                                 const DataSplits<Real>& data, std::ostream& out) {
  if (!cfg.teacher_checkpoint.empty()) return load_teacher<Real>(cfg);
  const RunConfig tc = teacher_config(cfg);
  out << "training teacher (T=" << tc.timesteps << ")\n";
  TrainResult<Real> r = train_into(dir / "teacher", tc, data, static_cast<ResidualNet<Real>*>(nullptr));
  cfg.teacher_checkpoint = fs::absolute(dir / "teacher" / "model.ckpt").string();
  out << "  teacher accuracy " << r.final_eval.accuracy << "\n";
  return std::move(r.net);
}

inline RunConfig student_config(const RunConfig& base, int t) {
  RunConfig s = base;
  s.role = Role::kStudent;
  s.timesteps = t;
  s.normalize();
  s.validate();
  return s;
}

inline double tap_footprint_bytes(const NetConfig& model, const RunConfig& cfg,
                                  std::size_t real_size) {
  ResidualNet<double> net(model, 0);
  double elems = 0;
  for (auto site : net.tap_sites(cfg.distill.granularity)) {
    elems += static_cast<double>(numel(net.lif_sites()[site].shape));
  }
  // Teacher and student membranes for one batch over the student's steps.
  return 2.0 * elems * static_cast<double>(cfg.timesteps) *
         static_cast<double>(cfg.batch_size) * static_cast<double>(real_size);
}

template <typename Real>
int run_train(const Options& o, Role role, std::ostream& out) {
  RunConfig cfg = build_config(o, role);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  std::optional<ResidualNet<Real>> teacher;
  if (cfg.needs_teacher()) teacher.emplace(load_teacher<Real>(cfg));
  TrainResult<Real> r = train_into(dir, cfg, data, teacher ? &*teacher : nullptr);
  out << dir.string() << "\n"
      << "test accuracy " << r.final_eval.accuracy << ", sparsity "
      << r.final_eval.sparsity.network << "\n";
  return kOk;
}

template <typename Real>
int run_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  RunConfig cfg = build_config(o, std::nullopt, false);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  ResidualNet<Real> net = load_net<Real>(cfg, o.checkpoint);
  EvalOptions eo;
  eo.timesteps = cfg.timesteps;
  eo.quant = cfg.role == Role::kTeacher ? NetQuant{} : cfg.quant;
  const EvalResult<Real> e = evaluate(net, data.test, eo);
  write_json((dir / "eval.json").string(), eval_summary(e));
  out << dir.string() << "\naccuracy " << e.accuracy << ", sparsity " << e.sparsity.network << "\n";
  return kOk;
}

template <typename Real>
int run_ablate_granularity(const Options& o, std::ostream& out) {
  RunConfig cfg = build_config(o, Role::kStudent, false);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  ResidualNet<Real> teacher = obtain_teacher(dir, cfg, data, out);
  // Wall times go to timing.json so ablation.jsonl stays reproducible.
  JsonlWriter report((dir / "ablation.jsonl").string());
  json timing = json::object();
  for (Granularity g : {Granularity::kConv, Granularity::kBlock, Granularity::kGroup}) {
    RunConfig s = student_config(cfg, cfg.timesteps);
    s.distill.granularity = g;
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult<Real> r = train_into(dir / to_string(g), s, data, &teacher);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.write(json{{"granularity", to_string(g)},
                      {"accuracy", r.final_eval.accuracy},
                      {"sparsity", r.final_eval.sparsity.network},
                      {"tap_footprint_bytes", tap_footprint_bytes(s.model, s, sizeof(Real))}});
    timing[to_string(g)] = json{{"wall_time_s", secs}};
    out << to_string(g) << ": accuracy " << r.final_eval.accuracy << ", " << secs << " s\n";
  }
  write_json((dir / "timing.json").string(), timing);
  out << dir.string() << "\n";
  return kOk;
}

template <typename Real>
int run_ablate_loss(const Options& o, std::ostream& out) {
  RunConfig cfg = build_config(o, Role::kStudent, false);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  ResidualNet<Real> teacher = obtain_teacher(dir, cfg, data, out);
  EvalOptions teo;
  teo.timesteps = cfg.teacher_timesteps;
  teo.capture = cfg.distill.granularity;
  const EvalResult<Real> te = evaluate(teacher, data.test, teo);
  JsonlWriter report((dir / "ablation.jsonl").string());
  for (MembraneLossKind k : {MembraneLossKind::kKl, MembraneLossKind::kMse}) {
    RunConfig s = student_config(cfg, cfg.timesteps);
    s.distill.membrane_loss = k;
    TrainResult<Real> r = train_into(dir / to_string(k), s, data, &teacher);
    EvalOptions seo;
    seo.timesteps = s.timesteps;
    seo.quant = s.quant;
    seo.capture = s.distill.granularity;
    const EvalResult<Real> se = evaluate(r.net, data.test, seo);
    const HistogramSet h = paired_histograms(te, se, s.hist_bins, s.model.v_th);
    report.write(json{{"membrane_loss", to_string(k)},
                      {"accuracy", se.accuracy},
                      {"sparsity", se.sparsity.network},
                      {"above_threshold", h.student_above},
                      {"divergence", membrane_divergence(h.teacher, h.student)}});
    out << to_string(k) << ": accuracy " << se.accuracy << ", sparsity " << se.sparsity.network
        << ", above-threshold " << h.student_above << "\n";
  }
  out << dir.string() << "\n";
  return kOk;
}

template <typename Real>
FlopsReport write_flops(const fs::path& dir, const RunConfig& cfg, std::size_t train_size) {
  const ResidualNet<double> net(cfg.model, 0);
  const VersatileSchedule plan =
      versatile_schedule(cfg.teacher_timesteps, cfg.students, net.flops_per_timestep(),
                         static_cast<double>(train_size), cfg.epochs);
  const FlopsReport rep = flops_report(plan.ledger);
  json j = to_json(rep);
  j["flops_per_timestep"] = plan.ledger.flops_per_timestep;
  j["samples_per_epoch"] = plan.ledger.steps_per_epoch;
  j["epochs"] = plan.ledger.epochs;
  j["teacher_timesteps"] = cfg.teacher_timesteps;
  j["students"] = cfg.students;
  write_json((dir / "flops.json").string(), j);
  return rep;
}

template <typename Real>
int run_versatile(const Options& o, std::ostream& out) {
  RunConfig cfg = build_config(o, Role::kStudent, false);
  // Validates the schedule before any training.
  versatile_schedule(cfg.teacher_timesteps, cfg.students);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  ResidualNet<Real> teacher = obtain_teacher(dir, cfg, data, out);
  JsonlWriter report((dir / "students.jsonl").string());
  for (int t : cfg.students) {
    const RunConfig s = student_config(cfg, t);
    TrainResult<Real> r = train_into(dir / ("student_t" + std::to_string(t)), s, data, &teacher);
    report.write(json{{"timesteps", t},
                      {"accuracy", r.final_eval.accuracy},
                      {"sparsity", r.final_eval.sparsity.network}});
    out << "student t=" << t << ": accuracy " << r.final_eval.accuracy << "\n";
  }
  const FlopsReport rep = write_flops<Real>(dir, cfg, data.train.size());
  out << "training FLOPs reduction " << std::fixed << std::setprecision(1)
      << rep.reduction_percent << "%\n"
      << dir.string() << "\n";
  return kOk;
}

template <typename Real>
int run_flops(const Options& o, std::ostream& out) {
  RunConfig cfg = build_config(o, Role::kStudent, false);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  std::size_t train_size = cfg.data.num_classes * cfg.data.train_per_class;
  if (cfg.data.source == "idx") train_size = make_datasets<Real>(cfg.data, cfg.model).train.size();
  const FlopsReport rep = write_flops<Real>(dir, cfg, train_size);
  out << "versatile " << rep.versatile_flops << " FLOPs, traditional " << rep.traditional_flops
      << " FLOPs, reduction " << std::fixed << std::setprecision(1) << rep.reduction_percent
      << "%\n"
      << dir.string() << "\n";
  return kOk;
}

template <typename Real>
int run_export_hist(const Options& o, std::ostream& out) {
  if (o.teacher.empty() || o.student.empty()) {
    throw UsageError("export-hist needs --teacher and --student checkpoints");
  }
  RunConfig cfg = build_config(o, std::nullopt, false);
  const fs::path dir = make_run_dir(o.out_dir, cfg);
  write_config(dir, cfg);
  const auto data = make_datasets<Real>(cfg.data, cfg.model);
  ResidualNet<Real> teacher = load_net<Real>(cfg, o.teacher);
  ResidualNet<Real> student = load_net<Real>(cfg, o.student);
  EvalOptions teo;
  teo.timesteps = cfg.teacher_timesteps;
  teo.capture = cfg.distill.granularity;
  EvalOptions seo = teo;
  seo.timesteps = cfg.timesteps;
  seo.quant = cfg.role == Role::kTeacher ? NetQuant{} : cfg.quant;
  const EvalResult<Real> te = evaluate(teacher, data.test, teo);
  const EvalResult<Real> se = evaluate(student, data.test, seo);
  const HistogramSet h = paired_histograms(te, se, cfg.hist_bins, cfg.model.v_th);
  JsonlWriter hist((dir / "histograms.jsonl").string());
  for (const auto& x : h.teacher) {
    json j = to_json(x);
    j["model"] = "teacher";
    hist.write(j);
  }
  for (const auto& x : h.student) {
    json j = to_json(x);
    j["model"] = "student";
    hist.write(j);
  }
  const double div = membrane_divergence(h.teacher, h.student);
  write_json((dir / "hist_summary.json").string(),
             json{{"divergence", div},
                  {"teacher_above_threshold", h.teacher_above},
                  {"student_above_threshold", h.student_above},
                  {"granularity", to_string(cfg.distill.granularity)},
                  {"bins", cfg.hist_bins}});
  out << "divergence " << div << ", student above-threshold " << h.student_above << "\n"
      << dir.string() << "\n";
  return kOk;
}

template <typename Real>
int dispatch(const Options& o, std::ostream& out) {
  const std::string& c = o.command;
  if (c == "train-teacher") return run_train<Real>(o, Role::kTeacher, out);
  if (c == "train-student") return run_train<Real>(o, Role::kStudent, out);
  if (c == "train-baseline") return run_train<Real>(o, Role::kBaseline, out);
  if (c == "eval") return run_eval<Real>(o, out);
  if (c == "ablate-granularity") return run_ablate_granularity<Real>(o, out);
  if (c == "ablate-loss") return run_ablate_loss<Real>(o, out);
  if (c == "versatile") return run_versatile<Real>(o, out);
  if (c == "flops-report") return run_flops<Real>(o, out);
  if (c == "export-hist") return run_export_hist<Real>(o, out);
  throw UsageError("unknown command '" + c + "'");
}

// Parses argv and runs one command. Errors map to distinct exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Membrane-aware distillation for quantized spiking networks"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train-teacher", "train a full-precision teacher"},
      {"train-student", "distill a quantized student from a teacher checkpoint"},
      {"train-baseline", "train a quantized network without distillation"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"ablate-granularity", "distill at conv, block and group taps"},
      {"ablate-loss", "distill with KL and MSE membrane losses"},
      {"versatile", "one teacher at T, one student per t <= T"},
      {"flops-report", "training FLOPs of the versatile and traditional schedules"},
      {"export-hist", "membrane histograms of a teacher/student pair"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "INI config file");
    sub->add_option("--set", o.sets, "override, section.key=value (repeatable)");
    sub->add_option("--out", o.out_dir, "directory for run outputs");
    sub->add_option("--seed", o.seed, "run seed");
    if (name == "eval") sub->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate");
    if (name == "export-hist") {
      sub->add_option("--teacher", o.teacher, "teacher checkpoint");
      sub->add_option("--student", o.student, "student checkpoint");
    }
    if (name == "versatile" || name == "flops-report") {
      sub->add_option("--teacher-timesteps", o.teacher_timesteps, "teacher timesteps T");
      sub->add_option("--students", o.students, "student timesteps, e.g. 1,2,3,4");
    }
    sub->callback([&o, n = name] { o.command = n; });
  }
  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto& c : commands) known = known || c.first == argv[1];
    if (!known) {
      err << "usage error: unknown command '" << argv[1] << "'\n";
      return kUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }
  try {
    ptree t = config_file(o);
    for (const auto& a : overrides(o, std::nullopt)) apply_override(t, a);
    return from_ptree(t).precision == "f32" ? dispatch<float>(o, out)
                                            : dispatch<double>(o, out);
  } catch (const MissingTeacherError& e) {
    err << "missing teacher: " << e.what() << "\n";
    return kMissingTeacher;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const IdxError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace mdsnn::cli

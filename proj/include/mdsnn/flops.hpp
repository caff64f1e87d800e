#pragma once

#include <string>
#include <vector>

#include "mdsnn/error.hpp"

// Training-cost bookkeeping for the one-teacher-many-students schedule.
//
// Cost model: a training job at k timesteps costs k * F * steps * epochs,
// with the same per-timestep cost F for teacher and student (fake
// quantization runs in real arithmetic).
namespace mdsnn {

enum class JobKind { kTrainTeacher, kDistillStudent };

struct TrainingJob {
  JobKind kind;
  int timesteps;
};

struct FlopsLedger {
  double flops_per_timestep = 1.0;  // F, forward+backward for one sample
  double steps_per_epoch = 1.0;     // samples (or batches) per epoch
  int epochs = 1;
  std::vector<TrainingJob> versatile;    // 1 teacher + N students
  std::vector<TrainingJob> traditional;  // N teachers + N students

  double job_cost(const TrainingJob& j) const {
    return static_cast<double>(j.timesteps) * flops_per_timestep *
           steps_per_epoch * static_cast<double>(epochs);
  }

  double total(const std::vector<TrainingJob>& jobs) const {
    double s = 0;
    for (const auto& j : jobs) s += job_cost(j);
    return s;
  }
};

struct VersatileSchedule {
  std::vector<TrainingJob> jobs;  // execution order
  FlopsLedger ledger;
};

// Teacher at T first, then one distillation job per student timestep. The
// ledger also prices the traditional alternative: a dedicated teacher for
// every student timestep.
inline VersatileSchedule versatile_schedule(int teacher_timesteps,
                                            const std::vector<int>& student_ts,
                                            double flops_per_timestep = 1.0,
                                            double steps_per_epoch = 1.0,
                                            int epochs = 1) {
  if (student_ts.empty()) {
    throw ConfigError("versatile schedule needs at least one student timestep");
  }
  if (teacher_timesteps < 1) throw ConfigError("teacher timesteps must be >= 1");
  for (int t : student_ts) {
    if (t < 1 || t > teacher_timesteps) {
      throw ConfigError("student timestep t=" + std::to_string(t) +
                        " must satisfy 1 <= t <= T=" +
                        std::to_string(teacher_timesteps));
    }
  }
  VersatileSchedule s;
  s.ledger.flops_per_timestep = flops_per_timestep;
  s.ledger.steps_per_epoch = steps_per_epoch;
  s.ledger.epochs = epochs;
  s.jobs.push_back({JobKind::kTrainTeacher, teacher_timesteps});
  for (int t : student_ts) s.jobs.push_back({JobKind::kDistillStudent, t});
  s.ledger.versatile = s.jobs;
  for (int t : student_ts) {
    s.ledger.traditional.push_back({JobKind::kTrainTeacher, t});
    s.ledger.traditional.push_back({JobKind::kDistillStudent, t});
  }
  return s;
}

struct FlopsReport {
  double versatile_flops = 0;
  double traditional_flops = 0;
  double reduction = 0;          // 1 - versatile / traditional
  double reduction_percent = 0;
  std::size_t versatile_trainings = 0;
  std::size_t traditional_trainings = 0;
};

inline FlopsReport flops_report(const FlopsLedger& ledger) {
  FlopsReport r;
  r.versatile_flops = ledger.total(ledger.versatile);
  r.traditional_flops = ledger.total(ledger.traditional);
  // Saved/total rather than 1 - ratio: exact when the costs are integers.
  const double saved = r.traditional_flops - r.versatile_flops;
  if (r.traditional_flops > 0) {
    r.reduction = saved / r.traditional_flops;
    r.reduction_percent = 100.0 * saved / r.traditional_flops;
  }
  r.versatile_trainings = ledger.versatile.size();
  r.traditional_trainings = ledger.traditional.size();
  return r;
}

}  // namespace mdsnn

// SPDX-License-Identifier: Apache-2.0
//
// Shared epoch bookkeeping for the training loops: early stopping with a
// best-parameter snapshot, learning curves, and resumable state.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundkit/neural.hpp"

namespace groundkit {

struct TrainProgress;

struct TrainSchedule {
  AdamWConfig optimizer;
  std::size_t batch_size = 64;
  int max_epochs = 10;
  int patience = 3;
  std::uint64_t seed = 0;
  /// Stop (resumably) after this many epochs in this call; 0 = no limit.
  int epoch_budget = 0;
  /// Called after every completed epoch (checkpointing hook).
  std::function<void(const TrainProgress&)> on_epoch;
};

struct CurveRow {
  int epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double dev_metric = 0.0;
};

struct TrainProgress {
  int epoch = 0;  // completed epochs
  std::size_t step = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int stale = 0;
  bool finished = false;
  std::map<std::string, Matrix> best;
  std::vector<CurveRow> curve;
};

inline nlohmann::json progress_json(const TrainProgress& p) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& r : p.curve) curve.push_back({r.epoch, r.step, r.loss, r.dev_metric});
  return {{"epoch", p.epoch},          {"step", p.step},   {"best_metric", p.best_metric},
          {"best_epoch", p.best_epoch}, {"stale", p.stale}, {"finished", p.finished},
          {"curve", curve}};
}

inline void progress_from_json(const nlohmann::json& j, TrainProgress& p) {
  p.epoch = j.at("epoch").get<int>();
  p.step = j.at("step").get<std::size_t>();
  p.best_metric = j.at("best_metric").is_null() ? -std::numeric_limits<double>::infinity()
                                                  : j.at("best_metric").get<double>();
  p.best_epoch = j.at("best_epoch").get<int>();
  p.stale = j.at("stale").get<int>();
  p.finished = j.at("finished").get<bool>();
  p.curve.clear();
  for (const auto& r : j.at("curve"))
    p.curve.push_back({r[0].get<int>(), r[1].get<std::size_t>(), r[2].get<double>(), r[3].get<double>()});
}

/// Writes "epoch,step,loss,dev_metric" rows preceded by a comment line.
inline void write_curve_csv(const std::string& path, const std::vector<CurveRow>& rows, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "# seed=" << seed << "\n";
  out << "epoch,step,loss,dev_metric\n";
  out.precision(17);
  for (const auto& r : rows) out << r.epoch << ',' << r.step << ',' << r.loss << ',' << r.dev_metric << "\n";
}

/// Runs epochs until early stopping, the epoch limit or the per-call
/// budget. `run_epoch(epoch, optimizer)` trains one epoch and returns the
/// mean loss; `dev_metric()` scores the current parameters (higher is
/// better). On completion the best snapshot is restored.
inline void run_epochs(const ParameterList& params, AdamW& opt, const TrainSchedule& sched, TrainProgress& progress,
                       const std::function<double(int, AdamW&)>& run_epoch, const std::function<double()>& dev_metric) {
  opt.set_position(progress.step);
  int ran = 0;
  while (!progress.finished && progress.epoch < sched.max_epochs) {
    if (sched.epoch_budget > 0 && ran >= sched.epoch_budget) return;
    const double loss = run_epoch(progress.epoch, opt);
    progress.step = opt.position();
    const double metric = dev_metric();
    ++progress.epoch;
    ++ran;
    progress.curve.push_back({progress.epoch, progress.step, loss, metric});
    if (metric > progress.best_metric) {
      progress.best_metric = metric;
      progress.best_epoch = progress.epoch;
      progress.stale = 0;
      for (const auto* p : params) progress.best[p->name] = p->value;
    } else if (++progress.stale >= sched.patience) {
      progress.finished = true;
    }
    if (sched.on_epoch) sched.on_epoch(progress);
  }
  progress.finished = true;
  for (auto* p : params) {
    auto it = progress.best.find(p->name);
    if (it != progress.best.end()) p->value = it->second;
  }
}

inline void store_progress(Checkpoint& ck, const TrainProgress& p, const std::string& prefix) {
  for (const auto& [name, m] : p.best) ck.tensors["best/" + prefix + name] = m;
}

inline void restore_progress(const Checkpoint& ck, TrainProgress& p, const ParameterList& params,
                             const std::string& prefix) {
  p.best.clear();
  for (const auto* q : params) {
    const auto key = "best/" + prefix + q->name;
    if (ck.contains(key)) p.best[q->name] = ck.at(key);
  }
}

}  // namespace groundkit

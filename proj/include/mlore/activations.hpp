#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "mlore/train.hpp"

namespace mlore {

/// Routing decisions over a dataset: log[module][task][sample].
using GateLog = std::vector<std::vector<std::vector<GateVector>>>;

struct ActivationRow {
  std::size_t module_id, expert_id, rank, task_id;
  double activation_ratio;  // fraction of samples on which the task selected the expert
  double mean_gate;         // gate averaged over all samples, zeros included
};

struct CoactivationRow {
  std::size_t module_id, expert_id, num_tasks;
  double fraction;  // fraction of samples on which exactly num_tasks tasks (0..T) selected the expert
};

struct ActivationStats {
  std::vector<ActivationRow> rows;
  std::vector<CoactivationRow> coactivation;
};

/// Eval-mode (noise off) gate vectors of every MLoRE module for every sample.
template <typename T>
GateLog collect_gates(MultiTaskModel<T>& model, const Dataset& data, std::size_t batch_size = 8) {
  if (model.kind != DecoderKind::mlore) throw ContractError("activation export needs an MLoRE decoder");
  const std::size_t modules = model.decoder.num_modules(), tasks = model.cfg.num_tasks();
  GateLog log(modules, std::vector<std::vector<GateVector>>(tasks));
  NoGradGuard guard;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch<T> batch = make_batch<T>(data, idx);
    DecoderOutput<T> out = model.forward(Var<T>(batch.images), ForwardContext{});
    for (std::size_t m = 0; m < modules; ++m)
      for (std::size_t t = 0; t < tasks; ++t)
        for (const auto& g : out.routes[m][t].vectors) log[m][t].push_back(g);
  }
  return log;
}

inline ActivationStats activation_stats(const GateLog& log, const std::vector<std::size_t>& ranks) {
  ActivationStats s;
  const std::size_t n_exp = ranks.size();
  for (std::size_t m = 0; m < log.size(); ++m) {
    const std::size_t tasks = log[m].size();
    const std::size_t samples = tasks ? log[m][0].size() : 0;
    if (samples == 0) throw ContractError("activation_stats: empty gate log");
    std::vector<std::vector<std::size_t>> per_sample(n_exp, std::vector<std::size_t>(samples, 0));
    for (std::size_t t = 0; t < tasks; ++t) {
      if (log[m][t].size() != samples) throw ContractError("activation_stats: ragged gate log");
      std::vector<std::size_t> hits(n_exp, 0);
      std::vector<double> gate_sum(n_exp, 0);
      for (std::size_t i = 0; i < samples; ++i) {
        const GateVector& g = log[m][t][i];
        for (std::size_t e : g.active) {
          ++hits[e];
          ++per_sample[e][i];
        }
        for (std::size_t e = 0; e < n_exp; ++e) gate_sum[e] += g.gates.at(e);
      }
      for (std::size_t e = 0; e < n_exp; ++e)
        s.rows.push_back({m, e, ranks[e], t, double(hits[e]) / double(samples), gate_sum[e] / double(samples)});
    }
    for (std::size_t e = 0; e < n_exp; ++e) {
      std::vector<std::size_t> hist(tasks + 1, 0);
      for (std::size_t i = 0; i < samples; ++i) ++hist[per_sample[e][i]];
      for (std::size_t j = 0; j <= tasks; ++j) s.coactivation.push_back({m, e, j, double(hist[j]) / double(samples)});
    }
  }
  std::sort(s.rows.begin(), s.rows.end(), [](const ActivationRow& a, const ActivationRow& b) {
    return std::tie(a.module_id, a.expert_id, a.task_id) < std::tie(b.module_id, b.expert_id, b.task_id);
  });
  return s;
}

template <typename T>
ActivationStats export_activations(MultiTaskModel<T>& model, const Dataset& data) {
  return activation_stats(collect_gates(model, data), model.cfg.ranks());
}

/// Smallest activation frequency of any (module, expert) pair, averaged over
/// tasks.
inline double min_activation_frequency(const ActivationStats& s) {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> freq;
  for (const auto& r : s.rows) {
    auto& f = freq[{r.module_id, r.expert_id}];
    f.first += r.activation_ratio;
    ++f.second;
  }
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& [key, f] : freq) lo = std::min(lo, f.first / double(f.second));
  return lo;
}

inline std::string format_activation_csv(const ActivationStats& s) {
  std::string out = "module_id,expert_id,rank,task_id,activation_ratio,mean_gate\n";
  char line[128];
  for (const auto& r : s.rows) {
    std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%.9g,%.9g\n", r.module_id, r.expert_id, r.rank, r.task_id,
                  r.activation_ratio, r.mean_gate);
    out += line;
  }
  return out;
}

inline std::string format_coactivation_csv(const ActivationStats& s) {
  std::string out = "module_id,expert_id,num_tasks,fraction\n";
  char line[96];
  for (const auto& r : s.coactivation) {
    std::snprintf(line, sizeof line, "%zu,%zu,%zu,%.9g\n", r.module_id, r.expert_id, r.num_tasks, r.fraction);
    out += line;
  }
  return out;
}

}  // namespace mlore

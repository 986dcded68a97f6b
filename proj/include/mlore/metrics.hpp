#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlore/data.hpp"
#include "mlore/tasks.hpp"

namespace mlore {

struct MetricsReport {
  std::vector<std::string> tasks;
  std::vector<double> values;  // one per task, in the task's own metric
  std::optional<double> delta_m;

  double operator[](const std::string& task) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i] == task) return values[i];
    throw ContractError("metrics report has no task '" + task + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    nlohmann::json m = nlohmann::json::object();
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      m[tasks[i]] = {{"metric", metric_name(task_spec(tasks[i]).metric)}, {"value", values[i]}};
    }
    j["metrics"] = m;
    if (delta_m) j["delta_m_percent"] = *delta_m;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& [task, entry] : j.at("metrics").items()) {
      task_spec(task);
      r.tasks.push_back(task);
      r.values.push_back(entry.at("value").get<double>());
    }
    if (j.contains("delta_m_percent")) r.delta_m = j["delta_m_percent"].get<double>();
    return r;
  }

  std::string format() const {
    std::string out;
    char line[128];
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      std::snprintf(line, sizeof line, "%-10s %-5s %.6f\n", tasks[i].c_str(), metric_name(task_spec(tasks[i]).metric),
                    values[i]);
      out += line;
    }
    if (delta_m) {
      std::snprintf(line, sizeof line, "delta_m    %+.4f%%\n", *delta_m);
      out += line;
    }
    return out;
  }
};

/// (100 / T) * sum_t (-1)^{l_t} (M_m,t - M_b,t) / M_b,t with l_t = 1 for
/// lower-is-better metrics. Tasks are matched by name.
inline double delta_m(const MetricsReport& model, const MetricsReport& baseline) {
  if (model.tasks.empty()) throw ContractError("delta_m: no tasks");
  double sum = 0;
  for (std::size_t i = 0; i < model.tasks.size(); ++i) {
    const std::string& t = model.tasks[i];
    bool found = false;
    double b = 0;
    for (std::size_t j = 0; j < baseline.tasks.size(); ++j)
      if (baseline.tasks[j] == t) {
        b = baseline.values[j];
        found = true;
      }
    if (!found) throw ContractError("delta_m: baseline has no metric for task '" + t + "'");
    if (b == 0) throw ContractError("delta_m: baseline metric for task '" + t + "' is zero");
    const double rel = (model.values[i] - b) / b;
    sum += task_spec(t).higher_is_better ? rel : -rel;
  }
  return 100.0 * sum / double(model.tasks.size());
}

/// Dataset-level metrics from full-resolution predictions. Counts are exact
/// integers and sums are double, so results do not depend on sample order
/// beyond double rounding.
///   semseg   mIoU over classes with a nonempty union (argmax, ties to the lower class)
///   boundary pixel F1 at sigmoid(logit) > 0.5
///   depth    RMSE
///   normals  mean angular error in degrees over pixels with a defined target;
///            a zero prediction counts as 90 degrees
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::vector<TaskSpec> specs) : specs_(std::move(specs)) {
    inter_.assign(kNumClasses, 0);
    uni_.assign(kNumClasses, 0);
  }

  template <typename T>
  void add(const std::vector<Tensor<T>>& predictions, const Batch<T>& b) {
    if (predictions.size() != specs_.size()) throw ContractError("metrics: one prediction per task required");
    const std::size_t n = b.size(), hw = b.images.dim(2) * b.images.dim(3);
    for (std::size_t t = 0; t < specs_.size(); ++t) {
      const Tensor<T>& p = predictions[t];
      if (p.dim(0) != n || p.dim(1) != specs_[t].out_channels || p.dim(2) * p.dim(3) != hw) {
        throw ContractError("metrics: prediction " + to_string(p.shape()) + " does not fit task " + specs_[t].name);
      }
      switch (specs_[t].metric) {
        case MetricKind::miou:
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < hw; ++q) {
              std::size_t best = 0;
              for (std::size_t c = 1; c < kNumClasses; ++c)
                if (p[(i * kNumClasses + c) * hw + q] > p[(i * kNumClasses + best) * hw + q]) best = c;
              const std::size_t lab = b.seg[i * hw + q];
              if (best == lab) {
                ++inter_[lab];
                ++uni_[lab];
              } else {
                ++uni_[lab];
                ++uni_[best];
              }
            }
          break;
        case MetricKind::f1:
          for (std::size_t i = 0; i < n * hw; ++i) {
            const bool pred = p[i] > T(0), truth = b.boundary[i] > T(0.5);
            tp_ += pred && truth;
            fp_ += pred && !truth;
            fn_ += !pred && truth;
          }
          break;
        case MetricKind::rmse:
          for (std::size_t i = 0; i < n * hw; ++i) {
            const double d = double(p[i]) - double(b.depth[i]);
            sq_ += d * d;
          }
          depth_px_ += n * hw;
          break;
        case MetricKind::mean_angle_error:
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < hw; ++q) {
              if (b.normal_mask[i * 2 * hw + q] == T(0)) continue;
              const double px = p[i * 2 * hw + q], py = p[(i * 2 + 1) * hw + q];
              const double tx = b.normals[i * 2 * hw + q], ty = b.normals[(i * 2 + 1) * hw + q];
              const double np = std::sqrt(px * px + py * py), nt = std::sqrt(tx * tx + ty * ty);
              const double cosine = np > 0 ? std::clamp((px * tx + py * ty) / (np * nt), -1.0, 1.0) : 0.0;
              angle_ += std::acos(cosine) * 180.0 / 3.14159265358979323846;
              ++normal_px_;
            }
          break;
      }
    }
  }

  MetricsReport report() const {
    MetricsReport r;
    for (const auto& sp : specs_) {
      r.tasks.push_back(sp.name);
      double v = 0;
      switch (sp.metric) {
        case MetricKind::miou: {
          double sum = 0;
          std::size_t classes = 0;
          for (std::size_t c = 0; c < kNumClasses; ++c)
            if (uni_[c] > 0) {
              sum += double(inter_[c]) / double(uni_[c]);
              ++classes;
            }
          v = classes ? sum / double(classes) : 1.0;
          break;
        }
        case MetricKind::f1:
          v = tp_ + fp_ + fn_ == 0 ? 1.0 : 2.0 * double(tp_) / double(2 * tp_ + fp_ + fn_);
          break;
        case MetricKind::rmse: v = depth_px_ ? std::sqrt(sq_ / double(depth_px_)) : 0.0; break;
        case MetricKind::mean_angle_error: v = normal_px_ ? angle_ / double(normal_px_) : 0.0; break;
      }
      r.values.push_back(v);
    }
    return r;
  }

 private:
  std::vector<TaskSpec> specs_;
  std::vector<std::uint64_t> inter_, uni_;
  std::uint64_t tp_ = 0, fp_ = 0, fn_ = 0;
  double sq_ = 0, angle_ = 0;
  std::uint64_t depth_px_ = 0, normal_px_ = 0;
};

}  // namespace mlore

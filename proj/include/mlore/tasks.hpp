#pragma once

#include <string>
#include <vector>

#include "mlore/tensor.hpp"

namespace mlore {

enum class LossKind { cross_entropy, balanced_bce, l1 };
enum class MetricKind { miou, f1, rmse, mean_angle_error };

struct TaskSpec {
  std::string name;
  std::size_t out_channels = 1;
  LossKind loss = LossKind::l1;
  MetricKind metric = MetricKind::rmse;
  bool higher_is_better = false;
};

// Background plus rectangle, circle, triangle.
inline constexpr std::size_t kNumClasses = 4;

inline const std::vector<TaskSpec>& task_registry() {
  static const std::vector<TaskSpec> specs{
      {"semseg", kNumClasses, LossKind::cross_entropy, MetricKind::miou, true},
      {"boundary", 1, LossKind::balanced_bce, MetricKind::f1, true},
      {"depth", 1, LossKind::l1, MetricKind::rmse, false},
      {"normals", 2, LossKind::l1, MetricKind::mean_angle_error, false},
  };
  return specs;
}

inline const TaskSpec& task_spec(const std::string& name) {
  for (const auto& s : task_registry())
    if (s.name == name) return s;
  throw ContractError("unknown task '" + name + "' (known: semseg, boundary, depth, normals)");
}

inline std::vector<TaskSpec> task_specs(const std::vector<std::string>& names) {
  std::vector<TaskSpec> out;
  for (const auto& n : names) out.push_back(task_spec(n));
  return out;
}

inline const char* metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::miou: return "mIoU";
    case MetricKind::f1: return "F1";
    case MetricKind::rmse: return "RMSE";
    case MetricKind::mean_angle_error: return "mErr";
  }
  return "?";
}

}  // namespace mlore

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlore/io.hpp"
#include "mlore/tasks.hpp"

namespace mlore {

/// Hyper-parameters of the multi-task decoder. Serialized as JSON with the
/// keys listed in to_json(); `tasks` is a list of task names.
struct ModelConfig {
  std::vector<std::string> tasks{"semseg", "boundary", "depth", "normals"};
  std::size_t num_experts = 15;
  std::size_t top_k = 9;
  std::size_t channels = 64;
  std::size_t rank_min = 16;
  std::size_t rank_max = 128;
  std::size_t rank_step = 8;
  std::size_t specific_rank = 64;
  std::size_t expert_out_channels = 107;  // ceil(channels * 5 / 3)
  std::size_t scales = 4;
  std::size_t stack_per_scale = 2;
  double lb_weight = 0.01;
  bool noise = true;
  std::uint64_t seed = 0;

  std::size_t num_tasks() const { return tasks.size(); }

  /// Rank of shared expert n: rank_min + n * rank_step, capped at rank_max.
  std::vector<std::size_t> ranks() const {
    std::vector<std::size_t> r(num_experts);
    for (std::size_t n = 0; n < num_experts; ++n) r[n] = std::min(rank_min + n * rank_step, rank_max);
    return r;
  }

  static std::size_t default_expert_out(std::size_t channels) { return (channels * 5 + 2) / 3; }

  void validate() const {
    auto fail = [](const std::string& what) { throw ContractError("invalid config: " + what); };
    if (tasks.empty()) fail("at least one task is required");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      task_spec(tasks[i]);
      if (std::find(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(i), tasks[i]) != tasks.begin() + static_cast<std::ptrdiff_t>(i)) {
        fail("task '" + tasks[i] + "' listed twice");
      }
    }
    if (num_experts < 1) fail("num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts) fail("top_k must lie in [1, num_experts]");
    if (channels < 4 || channels % 4 != 0) fail("channels must be a positive multiple of 4");
    if (rank_min < 1 || rank_max < rank_min) fail("rank schedule needs 1 <= rank_min <= rank_max");
    if (specific_rank < 1) fail("specific_rank must be >= 1");
    if (expert_out_channels < 1) fail("expert_out_channels must be >= 1");
    if (scales < 1) fail("scales must be >= 1");
    if (stack_per_scale < 1) fail("stack_per_scale must be >= 1");
    if (!(lb_weight >= 0)) fail("lb_weight must be >= 0");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"tasks", tasks},
                          {"num_experts", num_experts},
                          {"top_k", top_k},
                          {"channels", channels},
                          {"rank_min", rank_min},
                          {"rank_max", rank_max},
                          {"rank_step", rank_step},
                          {"specific_rank", specific_rank},
                          {"expert_out_channels", expert_out_channels},
                          {"scales", scales},
                          {"stack_per_scale", stack_per_scale},
                          {"lb_weight", lb_weight},
                          {"noise", noise},
                          {"seed", seed}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected. An integer
  /// `tasks` selects the first T entries of the default task list.
  static ModelConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{"tasks",         "num_experts",   "top_k",
                                                "channels",      "rank_min",      "rank_max",
                                                "rank_step",     "specific_rank", "expert_out_channels",
                                                "scales",        "stack_per_scale", "lb_weight",
                                                "noise",         "seed"};
    if (!j.is_object()) throw ContractError("config: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ContractError("config: unknown key '" + key + "'");
      }
    }
    ModelConfig c;
    try {
      c = parse_fields(j);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

 private:
  static ModelConfig parse_fields(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("tasks")) {
      if (j["tasks"].is_number_integer()) {
        const ModelConfig defaults;
        const auto t = j["tasks"].get<std::int64_t>();
        if (t < 1 || t > static_cast<std::int64_t>(defaults.tasks.size())) throw ContractError("config: tasks count out of range");
        c.tasks.assign(defaults.tasks.begin(), defaults.tasks.begin() + static_cast<std::ptrdiff_t>(t));
      } else {
        c.tasks = j["tasks"].get<std::vector<std::string>>();
      }
    }
    auto read = [&j](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    read("num_experts", c.num_experts);
    read("top_k", c.top_k);
    read("channels", c.channels);
    c.expert_out_channels = default_expert_out(c.channels);
    read("rank_min", c.rank_min);
    read("rank_max", c.rank_max);
    read("rank_step", c.rank_step);
    read("specific_rank", c.specific_rank);
    read("expert_out_channels", c.expert_out_channels);
    read("scales", c.scales);
    read("stack_per_scale", c.stack_per_scale);
    read("lb_weight", c.lb_weight);
    read("noise", c.noise);
    read("seed", c.seed);
    return c;
  }

 public:
  static ModelConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("config " + path + ": " + e.what());
    }
    return from_json(j);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace mlore

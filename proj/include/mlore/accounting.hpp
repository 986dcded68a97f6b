#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mlore/config.hpp"
#include "mlore/tasks.hpp"

// Analytic parameter and FLOP counts for the whole decoder (backbone
// excluded). One multiply-accumulate is two FLOPs; pooling, softmax and
// pointwise activations cost one FLOP per element, BatchNorm two.

namespace mlore {

enum class Variant { standard_moe, mlore };

inline const char* variant_name(Variant v) { return v == Variant::mlore ? "MLoRE" : "MoE"; }

struct AccountingOptions {
  std::size_t expert_kernel = 3;  // first conv of every expert: 1 or 3
  std::size_t in_channels = 0;    // decoder input width; 0 means cfg.channels
  std::size_t height = 16;
  std::size_t width = 16;
  bool fused = true;  // MLoRE FLOPs at inference: one 3x3 conv per task
};

struct CostReport {
  std::vector<std::pair<std::string, std::uint64_t>> breakdown;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [name, v] : breakdown) t += v;
    return t;
  }
  std::uint64_t operator[](const std::string& name) const {
    for (const auto& [n, v] : breakdown)
      if (n == name) return v;
    throw ContractError("cost report has no component '" + name + "'");
  }
};

namespace cost {

inline std::uint64_t conv_params(std::uint64_t k, std::uint64_t cin, std::uint64_t cout) {
  return k * k * cin * cout + cout;
}
inline std::uint64_t conv_flops(std::uint64_t k, std::uint64_t cin, std::uint64_t cout, std::uint64_t hw) {
  return 2 * k * k * cin * cout * hw;
}
inline std::uint64_t lowrank_params(std::uint64_t k, std::uint64_t c, std::uint64_t r, std::uint64_t cout) {
  return conv_params(k, c, r) + conv_params(1, r, cout);
}
inline std::uint64_t lowrank_flops(std::uint64_t k, std::uint64_t c, std::uint64_t r, std::uint64_t cout,
                                   std::uint64_t hw) {
  return conv_flops(k, c, r, hw) + conv_flops(1, r, cout, hw);
}
// [k x k C -> C_e], ReLU, [1x1 C_e -> C]
inline std::uint64_t vanilla_expert_params(std::uint64_t k, std::uint64_t c, std::uint64_t ce) {
  return conv_params(k, c, ce) + conv_params(1, ce, c);
}
inline std::uint64_t vanilla_expert_flops(std::uint64_t k, std::uint64_t c, std::uint64_t ce, std::uint64_t hw) {
  return conv_flops(k, c, ce, hw) + ce * hw + conv_flops(1, ce, c, hw);
}
inline std::uint64_t router_params(std::uint64_t c, std::uint64_t n, std::uint64_t hw, bool scale_output) {
  const std::uint64_t q = c / 4, head_out = n + (scale_output ? 1 : 0);
  return conv_params(1, c, q) + conv_params(1, q, q) + hw + conv_params(1, c, q) + conv_params(1, c / 2, head_out) +
         conv_params(1, c / 2, n);
}
// Inference: noise head skipped.
inline std::uint64_t router_flops(std::uint64_t c, std::uint64_t n, std::uint64_t hw, bool scale_output) {
  const std::uint64_t q = c / 4, head_out = n + (scale_output ? 1 : 0);
  return conv_flops(1, c, q, hw) + conv_flops(1, q, q, hw) + q * hw  // content branch + pooling
         + 2 * hw * c + conv_flops(1, c, q, 1)                       // position branch
         + conv_flops(1, c / 2, head_out, 1) + n;                    // head + softmax
}

}  // namespace cost

/// Parameter count of the decoder; the breakdown covers projections,
/// generic, shared_experts, specific_experts, routers, bn, nonlinear, fuse and
/// heads (prediction heads come from the task registry).
inline CostReport count_params(const ModelConfig& cfg, Variant variant, const AccountingOptions& opt = {}) {
  cfg.validate();
  const std::uint64_t c = cfg.channels, t = cfg.num_tasks(), n = cfg.num_experts, k = opt.expert_kernel;
  const std::uint64_t cin = opt.in_channels ? opt.in_channels : c;
  const std::uint64_t hw = opt.height * opt.width;
  const bool ml = variant == Variant::mlore;
  std::uint64_t proj = 0, generic = 0, shared = 0, specific = 0, routers = 0, bn = 0, nonlinear = 0;
  for (std::size_t s = 0; s < cfg.scales; ++s) {
    for (std::size_t j = 0; j < cfg.stack_per_scale; ++j) {
      proj += t * cost::conv_params(1, j == 0 ? cin : c, c);
      if (ml) {
        generic += cost::conv_params(3, c, c);
        for (std::size_t r : cfg.ranks()) shared += cost::lowrank_params(k, c, r, c);
        specific += t * cost::lowrank_params(k, c, cfg.specific_rank, c);
        bn += t * 2 * c;
      } else {
        shared += n * cost::vanilla_expert_params(k, c, cfg.expert_out_channels);
      }
      routers += t * cost::router_params(c, n, hw, ml);
      bn += t * 2 * c;  // nonlinear block BatchNorm
      nonlinear += t * cost::conv_params(1, c, c);
    }
  }
  const std::uint64_t s = cfg.scales;
  const std::uint64_t fuse = s > 1 ? t * cost::conv_params(1, s * c, s) : 0;
  std::uint64_t heads = 0;
  for (const auto& name : cfg.tasks) heads += cost::conv_params(1, c, task_spec(name).out_channels);
  return CostReport{{{"projections", proj},
                     {"generic", generic},
                     {"shared_experts", shared},
                     {"specific_experts", specific},
                     {"routers", routers},
                     {"bn", bn},
                     {"nonlinear", nonlinear},
                     {"fuse", fuse},
                     {"heads", heads}}};
}

/// FLOPs of one forward pass for one sample at opt.height x opt.width.
/// Standard MoE runs top_k full-rank experts per task. Fused MLoRE replaces
/// generic, shared and specific paths (and the expert BatchNorm) with one 3x3
/// C -> C conv per task, reported as `fused`; unfused MLoRE charges the top_k
/// largest-rank experts per task.
inline CostReport count_flops(const ModelConfig& cfg, Variant variant, const AccountingOptions& opt = {}) {
  cfg.validate();
  const std::uint64_t c = cfg.channels, t = cfg.num_tasks(), n = cfg.num_experts, k = opt.expert_kernel;
  const std::uint64_t cin = opt.in_channels ? opt.in_channels : c;
  const std::uint64_t hw = opt.height * opt.width;
  const bool ml = variant == Variant::mlore;
  const bool fused = ml && opt.fused;
  std::vector<std::size_t> ranks = cfg.ranks();
  std::sort(ranks.rbegin(), ranks.rend());
  std::uint64_t proj = 0, generic = 0, shared = 0, specific = 0, routers = 0, bn = 0, nonlinear = 0, fconv = 0;
  for (std::size_t s = 0; s < cfg.scales; ++s) {
    for (std::size_t j = 0; j < cfg.stack_per_scale; ++j) {
      proj += t * cost::conv_flops(1, j == 0 ? cin : c, c, hw);
      if (fused) {
        fconv += t * cost::conv_flops(3, c, c, hw);
      } else if (ml) {
        generic += t * cost::conv_flops(3, c, c, hw);
        for (std::size_t e = 0; e < cfg.top_k; ++e) shared += t * (cost::lowrank_flops(k, c, ranks[e], c, hw) + 2 * c * hw);
        specific += t * (cost::lowrank_flops(k, c, cfg.specific_rank, c, hw) + 2 * c * hw);
        bn += t * 2 * c * hw;
      } else {
        shared += t * cfg.top_k * (cost::vanilla_expert_flops(k, c, cfg.expert_out_channels, hw) + 2 * c * hw);
      }
      routers += t * cost::router_flops(c, n, hw, ml);
      bn += t * 2 * c * hw;
      nonlinear += t * (c * hw + cost::conv_flops(1, c, c, hw));
    }
  }
  const std::uint64_t s = cfg.scales;
  const std::uint64_t fuse = s > 1 ? t * (cost::conv_flops(1, s * c, s, hw) + s * hw + 2 * s * c * hw) : 0;
  std::uint64_t heads = 0;
  for (const auto& name : cfg.tasks) heads += cost::conv_flops(1, c, task_spec(name).out_channels, hw);
  CostReport r{{{"projections", proj},
                {"generic", generic},
                {"shared_experts", shared},
                {"specific_experts", specific},
                {"routers", routers},
                {"bn", bn},
                {"nonlinear", nonlinear},
                {"fuse", fuse},
                {"heads", heads}}};
  if (fused) r.breakdown.insert(r.breakdown.begin() + 1, {"fused", fconv});
  return r;
}

struct TableRow {
  std::size_t num_experts = 0;
  std::size_t expert_kernel = 0;
  Variant variant = Variant::mlore;
  std::size_t top_k = 0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

/// Active experts for the table rows: 60% of N, rounded.
inline std::size_t table_top_k(std::size_t n) { return std::max<std::size_t>(1, (n * 3 + 2) / 5); }

/// Rows for {5, 10, 15} experts x {[1x1, 1x1], [3x3, 1x1]} x {MoE, MLoRE}.
inline std::vector<TableRow> compare_table(const ModelConfig& base, AccountingOptions opt = {}) {
  std::vector<TableRow> rows;
  for (std::size_t kernel : {std::size_t{1}, std::size_t{3}}) {
    for (std::size_t n : {5u, 10u, 15u}) {
      for (Variant v : {Variant::standard_moe, Variant::mlore}) {
        ModelConfig cfg = base;
        cfg.num_experts = n;
        cfg.top_k = table_top_k(n);
        opt.expert_kernel = kernel;
        rows.push_back({n, kernel, v, cfg.top_k, count_params(cfg, v, opt).total(), count_flops(cfg, v, opt).total()});
      }
    }
  }
  return rows;
}

/// Aligned text table; each MLoRE row carries its ratio to the matching MoE row.
inline std::string format_table(const std::vector<TableRow>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-26s %-6s %14s %16s %12s %12s\n", "setting", "model", "params", "FLOPs",
                "params/MoE", "FLOPs/MoE");
  out += line;
  const TableRow* moe = nullptr;
  for (const auto& r : rows) {
    char setting[64];
    std::snprintf(setting, sizeof setting, "%zu experts, [%zux%zu, 1x1]", r.num_experts, r.expert_kernel,
                  r.expert_kernel);
    if (r.variant == Variant::standard_moe) {
      moe = &r;
      std::snprintf(line, sizeof line, "%-26s %-6s %14llu %16llu %12s %12s\n", setting, variant_name(r.variant),
                    static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.flops), "", "");
    } else {
      const bool match = moe && moe->num_experts == r.num_experts && moe->expert_kernel == r.expert_kernel;
      const double pr = match ? double(r.params) / double(moe->params) : 0.0;
      const double fr = match ? double(r.flops) / double(moe->flops) : 0.0;
      std::snprintf(line, sizeof line, "%-26s %-6s %14llu %16llu %12.4f %12.4f\n", setting, variant_name(r.variant),
                    static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.flops), pr, fr);
    }
    out += line;
  }
  return out;
}

/// The full-scale configuration behind the savings claims: C = 384, vanilla
/// expert width 640, ranks 16..128 step 8, task-specific rank 64.
inline ModelConfig full_scale_config() {
  ModelConfig cfg;
  cfg.channels = 384;
  cfg.expert_out_channels = 640;
  return cfg;
}

}  // namespace mlore

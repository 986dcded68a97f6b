#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "mlore/mlore.hpp"

namespace mlore {

/// Plain (non-graph) 3x3 conv weights: weight (3, 3, C_in, C_out), bias (1, C_out, 1, 1).
template <typename T>
struct ConvKernel {
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Gated, BN-folded task-sharing expert path of one task and sample.
template <typename T>
struct FoldedSharedPath {
  ConvKernel<T> kernel;
};

/// The single conv a task's three paths collapse into.
template <typename T>
struct FusedConv {
  ConvKernel<T> kernel;
  std::size_t task = 0;
};

/// Composes conv1x1(conv_kxk(x)) into one 3x3 kernel:
///   W[i,j,c,o] = sum_r W_b[i,j,c,r] W_a[r,o],  b[o] = sum_r b_b[r] W_a[r,o] + b_a[o].
/// A 1x1 first conv lands in the kernel centre.
template <typename T>
ConvKernel<T> compose_lowrank(const LowRankExpert<T>& e) {
  const Tensor<T>& wb = e.down.weight.value();
  const Tensor<T>& bb = e.down.bias.value();
  const Tensor<T>& wa = e.up.weight.value();
  const Tensor<T>& ba = e.up.bias.value();
  const std::size_t kb = wb.dim(0), cin = wb.dim(2), rank = wb.dim(3), cout = wa.dim(3);
  ConvKernel<T> out{Tensor<T>({3, 3, cin, cout}), ba};
  const std::size_t pad = (3 - kb) / 2;
  for (std::size_t i = 0; i < kb; ++i)
    for (std::size_t j = 0; j < kb; ++j)
      for (std::size_t c = 0; c < cin; ++c) {
        const T* brow = &wb.at(i, j, c, 0);
        T* orow = &out.weight.at(i + pad, j + pad, c, 0);
        for (std::size_t r = 0; r < rank; ++r) {
          const T v = brow[r];
          const T* arow = &wa.at(0, 0, r, 0);
          for (std::size_t o = 0; o < cout; ++o) orow[o] += v * arow[o];
        }
      }
  for (std::size_t r = 0; r < rank; ++r)
    for (std::size_t o = 0; o < cout; ++o) out.bias[o] += bb[r] * wa.at(0, 0, r, o);
  return out;
}

/// Folds the gated expert sum and the eval-mode BatchNorm after it:
///   W = B(gamma / sqrt(var + eps)) * sum_{k in K} g_k W_k
///   b = gamma / sqrt(var + eps) * (sum_{k in K} g_k b_k - mu) + beta
/// `composed` optionally supplies precomputed compose_lowrank results.
template <typename T>
FoldedSharedPath<T> fold_shared(const GateVector& gates, const std::vector<LowRankExpert<T>>& experts,
                                const BatchNorm2d<T>& bn, const std::vector<ConvKernel<T>>* composed = nullptr) {
  if (bn.stats.training) throw ContractError("fold_shared: BatchNorm must be in eval mode");
  if (gates.gates.size() != experts.size()) throw ContractError("fold_shared: gate length mismatch");
  const std::size_t cin = experts.at(0).down.in_channels();
  const std::size_t cout = experts.at(0).up.out_channels();
  FoldedSharedPath<T> f{{Tensor<T>({3, 3, cin, cout}), Tensor<T>({1, cout, 1, 1})}};
  for (std::size_t k : gates.active) {
    const ConvKernel<T> ck = composed ? (*composed)[k] : compose_lowrank(experts[k]);
    const T g = static_cast<T>(gates.gates[k]);
    for (std::size_t i = 0; i < ck.weight.size(); ++i) f.kernel.weight[i] += g * ck.weight[i];
    for (std::size_t o = 0; o < cout; ++o) f.kernel.bias[o] += g * ck.bias[o];
  }
  const std::vector<T> s = bn.eval_scale();
  for (std::size_t i = 0; i < f.kernel.weight.size(); ++i) f.kernel.weight[i] *= s[i % cout];
  for (std::size_t o = 0; o < cout; ++o) {
    f.kernel.bias[o] = s[o] * (f.kernel.bias[o] - bn.stats.running_mean[o]) + bn.beta.value()[o];
  }
  return f;
}

/// W_r = W_g + W_lre + s * W_se and b_r = b_g + b_lre + s * b_se.
template <typename T>
FusedConv<T> fuse_task(std::size_t task, const GenericPath<T>& generic, const FoldedSharedPath<T>& folded,
                       const ConvKernel<T>& specific_composed, double scale) {
  const Tensor<T>& wg = generic.conv.weight.value();
  if (wg.shape() != folded.kernel.weight.shape() || wg.shape() != specific_composed.weight.shape()) {
    throw ContractError("fuse_task: width mismatch between paths " + to_string(wg.shape()) + ", " +
                        to_string(folded.kernel.weight.shape()) + ", " + to_string(specific_composed.weight.shape()));
  }
  const T s = static_cast<T>(scale);
  FusedConv<T> f{{wg, generic.conv.bias.value()}, task};
  for (std::size_t i = 0; i < wg.size(); ++i) {
    f.kernel.weight[i] += folded.kernel.weight[i] + s * specific_composed.weight[i];
  }
  for (std::size_t o = 0; o < f.kernel.bias.size(); ++o) {
    f.kernel.bias[o] += folded.kernel.bias[o] + s * specific_composed.bias[o];
  }
  return f;
}

template <typename T>
FusedConv<T> fuse_task(std::size_t task, const GenericPath<T>& generic, const FoldedSharedPath<T>& folded,
                       const LowRankExpert<T>& specific, double scale) {
  return fuse_task(task, generic, folded, compose_lowrank(specific), scale);
}

/// X * W_r + B(b_r): one 3x3 conv with broadcast bias.
template <typename T>
Tensor<T> fused_forward(const Tensor<T>& x, const FusedConv<T>& f) {
  const Shape xs = x.shape();
  const Shape ws = f.kernel.weight.shape();
  if (xs[1] != ws[2]) {
    throw ContractError("fused_forward: input " + to_string(xs) + " does not match kernel " + to_string(ws));
  }
  Tensor<T> out({xs[0], ws[3], xs[2], xs[3]});
  kernels::conv_forward(x.data(), xs[0], xs[1], xs[2], xs[3], f.kernel.weight.data(), ws[0], ws[3],
                        f.kernel.bias.data(), out.data());
  return out;
}

/// Eval-mode forward of a module through the fused per-(task, sample) convs.
/// Gates come from the routers exactly as in the multi-branch forward.
template <typename T>
ModuleOutput<T> fused_module_forward(MLoREModule<T>& m, const std::vector<Var<T>>& inputs,
                                     std::vector<std::vector<FusedConv<T>>>* fused_out = nullptr) {
  for (const auto& bn : m.expert_bn) {
    if (bn.stats.training) throw ContractError("fused forward requires eval-mode BatchNorm");
  }
  NoGradGuard guard;
  ForwardContext ctx;  // eval, noise off
  std::vector<ConvKernel<T>> composed;
  for (const auto& e : m.shared) composed.push_back(compose_lowrank(e));
  ModuleOutput<T> out;
  const std::vector<Var<T>> xs = m.project_tasks(inputs);
  if (fused_out) fused_out->assign(m.num_tasks, {});
  for (std::size_t t = 0; t < m.num_tasks; ++t) {
    RouteResult<T> r = m.route(t, xs[t], ctx);
    const ConvKernel<T> spec = compose_lowrank(m.specific[t]);
    const Shape s = xs[t].shape();
    const std::size_t per = s[1] * s[2] * s[3];
    Tensor<T> y({s[0], m.channels(), s[2], s[3]});
    for (std::size_t n = 0; n < s[0]; ++n) {
      const FoldedSharedPath<T> folded = fold_shared(r.vectors[n], m.shared, m.expert_bn[t], &composed);
      FusedConv<T> f = fuse_task(t, m.generic, folded, spec, r.vectors[n].scale);
      Tensor<T> xn({1, s[1], s[2], s[3]}, std::vector<T>(xs[t].value().data() + n * per,
                                                          xs[t].value().data() + (n + 1) * per));
      Tensor<T> yn = fused_forward(xn, f);
      std::copy(yn.data(), yn.data() + yn.size(), y.data() + n * yn.size());
      if (fused_out) (*fused_out)[t].push_back(std::move(f));
    }
    out.features.push_back(Var<T>(std::move(y)));
    out.routes.push_back(std::move(r));
  }
  return out;
}

/// Batch-averaged gate vector (mean gates and scale; active set is the union).
/// Fusing with it gives one conv per task for the whole batch; the result is
/// NOT equivalent to the routed forward and is only meant for latency runs.
inline GateVector average_gates(const std::vector<GateVector>& gs) {
  if (gs.empty()) throw ContractError("average_gates: no gate vectors");
  GateVector out;
  out.gates.assign(gs[0].gates.size(), 0.0);
  for (const auto& g : gs) {
    for (std::size_t e = 0; e < g.gates.size(); ++e) out.gates[e] += g.gates[e] / double(gs.size());
    out.scale += g.scale / double(gs.size());
  }
  for (std::size_t e = 0; e < out.gates.size(); ++e)
    if (out.gates[e] != 0) out.active.push_back(e);
  return out;
}

/// Frozen-gate fusion of every task of a module from one batch of inputs.
template <typename T>
std::vector<FusedConv<T>> fuse_frozen(MLoREModule<T>& m, const std::vector<Var<T>>& inputs) {
  NoGradGuard guard;
  const std::vector<Var<T>> xs = m.project_tasks(inputs);
  std::vector<FusedConv<T>> out;
  for (std::size_t t = 0; t < m.num_tasks; ++t) {
    const RouteResult<T> r = m.route(t, xs[t], ForwardContext{});
    const GateVector g = average_gates(r.vectors);
    out.push_back(fuse_task(t, m.generic, fold_shared(g, m.shared, m.expert_bn[t]), m.specific[t], g.scale));
  }
  return out;
}

struct EquivalenceTrial {
  std::size_t index = 0;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::size_t channels = 0;
  double max_relative_error = 0;
};

struct EquivalenceReport {
  std::string precision;
  double tolerance = 0;
  double max_relative_error = 0;
  bool pass = false;
  double seconds = 0;
  std::vector<EquivalenceTrial> trials;
};

struct EquivalenceOptions {
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t batch = 2;
  std::uint64_t seed = 0;
  bool zero_input = false;
  bool corrupt_fused_bias = false;  // negative control: perturbs b_r before the comparison
};

/// Tolerance for the multi-branch vs fused comparison at a given precision.
template <typename T>
constexpr double equivalence_tolerance() {
  return sizeof(T) == sizeof(float) ? 1e-5 : 1e-10;
}

/// Randomizes everything the fold depends on, including BN statistics and
/// affine parameters, so that no path is trivially zero.
template <typename T>
void randomize_for_equivalence(MLoREModule<T>& m, Rng& rng) {
  m.init(rng);
  for (auto& bn : m.expert_bn) {
    fill_uniform(bn.gamma.mutable_value(), rng, 1.0);
    for (auto& v : bn.gamma.mutable_value().values()) v += T(1);
    fill_uniform(bn.beta.mutable_value(), rng, 0.5);
    fill_uniform(bn.stats.running_mean, rng, 0.5);
    for (auto& v : bn.stats.running_var.values()) v = static_cast<T>(rng.uniform(0.25, 2.0));
    bn.stats.training = false;
  }
}

/// Multi-branch eval forward vs. fuse_task + fused_forward on one module with
/// fresh random weights, inputs and gates per trial.
template <typename T>
EquivalenceTrial check_equivalence_once(const ModelConfig& cfg, std::size_t index, const EquivalenceOptions& opt) {
  Rng rng(derive_seed(opt.seed, "equivalence", index));
  MLoREModule<T> m(cfg, cfg.channels, opt.height, opt.width);
  randomize_for_equivalence(m, rng);
  Tensor<T> x({opt.batch, cfg.channels, opt.height, opt.width});
  if (!opt.zero_input) fill_uniform(x, rng, 1.0);
  std::vector<Var<T>> inputs{Var<T>(x)};

  ModuleOutput<T> reference;
  {
    NoGradGuard guard;
    ForwardContext ctx;
    reference = m.forward(inputs, ctx);
  }
  std::vector<std::vector<FusedConv<T>>> fused;
  ModuleOutput<T> folded = fused_module_forward(m, inputs, &fused);
  if (opt.corrupt_fused_bias) {
    const std::vector<Var<T>> xs = m.project_tasks(inputs);
    for (std::size_t t = 0; t < m.num_tasks; ++t) {
      fused[t][0].kernel.bias[0] += T(1e-3) * (T(1) + std::abs(fused[t][0].kernel.bias[0]));
      const Shape s = xs[t].shape();
      const std::size_t per = s[1] * s[2] * s[3];
      Tensor<T> x0({1, s[1], s[2], s[3]},
                   std::vector<T>(xs[t].value().data(), xs[t].value().data() + per));
      Tensor<T> y0 = fused_forward(x0, fused[t][0]);
      Tensor<T> y = folded.features[t].value();
      std::copy(y0.data(), y0.data() + y0.size(), y.data());
      folded.features[t] = Var<T>(std::move(y));
    }
  }
  EquivalenceTrial trial{index, cfg.num_experts, cfg.top_k, cfg.channels, 0.0};
  for (std::size_t t = 0; t < m.num_tasks; ++t) {
    trial.max_relative_error =
        std::max(trial.max_relative_error, max_relative_error(folded.features[t].value(), reference.features[t].value()));
  }
  return trial;
}

/// Runs `trials` checks, cycling through `configs`.
template <typename T>
EquivalenceReport verify_equivalence(const std::vector<ModelConfig>& configs, std::size_t trials,
                                     const EquivalenceOptions& opt = {}) {
  if (configs.empty()) throw ContractError("verify_equivalence: no configurations");
  const auto start = std::chrono::steady_clock::now();
  EquivalenceReport report;
  report.precision = sizeof(T) == sizeof(float) ? "single" : "double";
  report.tolerance = equivalence_tolerance<T>();
  for (std::size_t i = 0; i < trials; ++i) {
    EquivalenceTrial trial = check_equivalence_once<T>(configs[i % configs.size()], i, opt);
    report.max_relative_error = std::max(report.max_relative_error, trial.max_relative_error);
    report.trials.push_back(trial);
  }
  report.pass = report.max_relative_error < report.tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Configurations spanning N in {5, 15}, C in {16, 64} and k in {3, 9, N}
/// (k = 9 is skipped where it exceeds N), ranks from the 16..128 step 8
/// schedule.
inline std::vector<ModelConfig> equivalence_sweep_configs() {
  std::vector<ModelConfig> out;
  for (std::size_t n : {5u, 15u}) {
    for (std::size_t c : {16u, 64u}) {
      for (std::size_t k : {std::size_t{3}, std::size_t{9}, n}) {
        if (k > n) continue;
        ModelConfig cfg;
        cfg.tasks = {"semseg", "depth"};
        cfg.num_experts = n;
        cfg.top_k = k;
        cfg.channels = c;
        cfg.rank_min = 16;
        cfg.rank_max = 128;
        cfg.rank_step = 8;
        cfg.specific_rank = 64;
        cfg.expert_out_channels = ModelConfig::default_expert_out(c);
        out.push_back(cfg);
      }
    }
  }
  return out;
}

}  // namespace mlore

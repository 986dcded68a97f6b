#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlore/config.hpp"
#include "mlore/gating.hpp"
#include "mlore/nn.hpp"

namespace mlore {

/// Per-call switches shared by every module of a forward pass.
struct ForwardContext {
  bool training = false;
  bool noise = false;            // router noise; only honoured while training
  std::uint64_t noise_seed = 0;  // per step; combined with module and task ids
  bool detach_generic = true;    // stop-gradient on the generic path input
  bool fused = false;            // eval only: single re-parameterized conv per task
};

/// conv1x1(conv3x3(x)) into `rank` channels and back, no nonlinearity.
template <typename T>
struct LowRankExpert {
  Conv2d<T> down;  // (3, 3, C, r)
  Conv2d<T> up;    // (1, 1, r, C_out)

  LowRankExpert() = default;
  LowRankExpert(std::size_t channels, std::size_t rank, std::size_t out_channels, std::size_t down_kernel = 3)
      : down(down_kernel, channels, rank), up(1, rank, out_channels) {}

  std::size_t rank() const { return down.out_channels(); }
  void init(Rng& rng) {
    down.init(rng);
    up.init(rng);
  }
  Var<T> operator()(const Var<T>& x) const { return up(down(x)); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    down.collect(prefix + ".down", out);
    up.collect(prefix + ".up", out);
  }
};

/// Single 3x3 C -> C conv traversed by every task.
template <typename T>
struct GenericPath {
  Conv2d<T> conv;

  GenericPath() = default;
  explicit GenericPath(std::size_t channels) : conv(3, channels, channels) {}

  Var<T> operator()(const Var<T>& x, bool detach_input) const { return conv(detach_input ? detach(x) : x); }
};

/// Task-specific router: content branch (two 1x1 convs C -> C/4 -> C/4, global
/// pool) and position branch (HW -> 1 spatial linear, then C -> C/4),
/// concatenated into a head producing N expert logits plus the scaling value.
template <typename T>
struct Router {
  Conv2d<T> content1, content2;
  SpatialLinear<T> position;
  Conv2d<T> position_dense;
  Conv2d<T> head;        // C/2 -> N + 1
  Conv2d<T> noise_head;  // C/2 -> N

  Router() = default;
  Router(std::size_t channels, std::size_t num_experts, std::size_t h, std::size_t w)
      : content1(1, channels, channels / 4),
        content2(1, channels / 4, channels / 4),
        position(h, w),
        position_dense(1, channels, channels / 4),
        head(1, channels / 2, num_experts + 1),
        noise_head(1, channels / 2, num_experts) {}

  std::size_t num_experts() const { return noise_head.out_channels(); }

  void init(Rng& rng) {
    content1.init(rng);
    content2.init(rng);
    position.init(rng);
    position_dense.init(rng);
    head.init(rng);
    noise_head.init(rng);
  }

  Var<T> features(const Var<T>& x) const {
    Var<T> content = global_avg_pool(content2(content1(x)));
    Var<T> pos = dense(position(x), position_dense.weight, position_dense.bias);
    return concat_channels<T>({content, pos});
  }

  /// Noise (when enabled and training) is standard normal scaled by
  /// softplus(noise head) + 1e-2 and added to the expert logits only.
  RouteResult<T> operator()(const Var<T>& x, std::size_t k, bool noisy, std::uint64_t noise_seed) const {
    const std::size_t n_exp = num_experts();
    if (k < 1 || k > n_exp) throw ContractError("route: k must lie in [1, N]");
    Var<T> h = features(x);
    Var<T> out = dense(h, head.weight, head.bias);
    Var<T> clean = slice_channels(out, 0, n_exp);
    RouteResult<T> r;
    r.scale = slice_channels(out, n_exp, n_exp + 1);
    std::vector<std::vector<std::size_t>> active;
    if (noisy) {
      Var<T> sd = add_scalar(softplus(dense(h, noise_head.weight, noise_head.bias)), T(1e-2));
      Tensor<T> eps(clean.shape());
      Rng rng(noise_seed);
      for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
      Var<T> logits = add(clean, mul(sd, Var<T>(eps)));
      r.gates = topk_softmax(logits, k, &active);
      r.load = noisy_topk_load(clean, sd, logits.value(), k);
    } else {
      r.gates = topk_softmax(clean, k, &active);
      Tensor<T> hard(clean.shape());
      for (std::size_t n = 0; n < active.size(); ++n)
        for (std::size_t e : active[n]) hard[n * n_exp + e] = T(1);
      r.load = Var<T>(std::move(hard));
    }
    r.vectors.resize(active.size());
    for (std::size_t n = 0; n < active.size(); ++n) {
      GateVector& g = r.vectors[n];
      g.gates.resize(n_exp);
      for (std::size_t e = 0; e < n_exp; ++e) g.gates[e] = static_cast<double>(r.gates.value()[n * n_exp + e]);
      g.active = active[n];
      g.scale = static_cast<double>(r.scale.value()[n]);
    }
    return r;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    content1.collect(prefix + ".content1", out);
    content2.collect(prefix + ".content2", out);
    position.collect(prefix + ".position", out);
    position_dense.collect(prefix + ".position_dense", out);
    head.collect(prefix + ".head", out);
    noise_head.collect(prefix + ".noise_head", out);
  }
};

template <typename T>
struct ModuleOutput {
  std::vector<Var<T>> features;        // S^t per task
  std::vector<RouteResult<T>> routes;  // per task
};

/// One mixture-of-low-rank-experts module:
///   S^t = generic(X^t) + BN_t(sum_{k in K_t} g^t_k expert_k(X^t)) + s^t specific_t(X^t)
/// with X^t = proj_t(input). All paths are linear so the module folds into
/// one 3x3 conv per task at inference.
template <typename T>
struct MLoREModule {
  std::size_t num_tasks = 0;
  std::size_t top_k = 0;
  std::vector<Conv2d<T>> projections;  // T x (1x1, C_in -> C)
  GenericPath<T> generic;
  std::vector<LowRankExpert<T>> shared;
  std::vector<Router<T>> routers;
  std::vector<BatchNorm2d<T>> expert_bn;
  std::vector<LowRankExpert<T>> specific;
  std::size_t module_id = 0;

  MLoREModule() = default;
  MLoREModule(const ModelConfig& cfg, std::size_t in_channels, std::size_t h, std::size_t w,
              std::size_t id = 0)
      : num_tasks(cfg.num_tasks()), top_k(cfg.top_k), generic(cfg.channels), module_id(id) {
    cfg.validate();
    const std::size_t c = cfg.channels;
    for (std::size_t t = 0; t < num_tasks; ++t) {
      projections.emplace_back(1, in_channels, c);
      routers.emplace_back(c, cfg.num_experts, h, w);
      expert_bn.emplace_back(c);
      specific.emplace_back(c, cfg.specific_rank, c);
    }
    for (std::size_t r : cfg.ranks()) shared.emplace_back(c, r, c);
  }

  std::size_t channels() const { return generic.conv.out_channels(); }
  std::size_t num_experts() const { return shared.size(); }

  void init(Rng& rng) {
    for (auto& p : projections) p.init(rng);
    generic.conv.init(rng);
    for (auto& e : shared) e.init(rng);
    for (auto& r : routers) r.init(rng);
    for (auto& e : specific) e.init(rng);
  }

  /// `inputs` is either one shared backbone feature or one feature per task.
  std::vector<Var<T>> project_tasks(const std::vector<Var<T>>& inputs) const {
    if (inputs.size() != 1 && inputs.size() != num_tasks) {
      throw ContractError("project_tasks: expected 1 or " + std::to_string(num_tasks) + " inputs");
    }
    std::vector<Var<T>> out;
    for (std::size_t t = 0; t < num_tasks; ++t) out.push_back(projections[t](inputs.size() == 1 ? inputs[0] : inputs[t]));
    return out;
  }

  RouteResult<T> route(std::size_t t, const Var<T>& xt, const ForwardContext& ctx) const {
    const bool noisy = ctx.training && ctx.noise;
    const std::uint64_t seed = derive_seed(ctx.noise_seed, "routing-noise", module_id * 1024 + t);
    return routers[t](xt, top_k, noisy, seed);
  }

  /// BN_t(sum over active experts of gate * expert(x)). Each expert runs only
  /// on the samples that selected it.
  Var<T> shared_expert_sum(std::size_t t, const Var<T>& xt, const RouteResult<T>& r, bool training) {
    const std::size_t batch = xt.shape()[0];
    if (r.vectors.size() != batch) throw ContractError("shared_expert_sum: one gate vector per sample required");
    Var<T> acc;
    for (std::size_t e = 0; e < shared.size(); ++e) {
      std::vector<std::size_t> idx;
      for (std::size_t n = 0; n < batch; ++n) {
        const auto& act = r.vectors[n].active;
        if (std::binary_search(act.begin(), act.end(), e)) idx.push_back(n);
      }
      if (idx.empty()) continue;
      Var<T> g = slice_channels(r.gates, e, e + 1);
      Var<T> y;
      if (idx.size() == batch) {
        y = scale_per_sample(shared[e](xt), g);
      } else {
        y = scale_per_sample(shared[e](gather_batch(xt, idx)), gather_batch(g, idx));
        y = scatter_batch(y, idx, batch);
      }
      acc = acc.valid() ? add(acc, y) : y;
    }
    return expert_bn[t](acc, training);
  }

  ModuleOutput<T> forward(const std::vector<Var<T>>& inputs, const ForwardContext& ctx) {
    ModuleOutput<T> out;
    const std::vector<Var<T>> xs = project_tasks(inputs);
    for (std::size_t t = 0; t < num_tasks; ++t) {
      RouteResult<T> r = route(t, xs[t], ctx);
      Var<T> s = generic(xs[t], ctx.training && ctx.detach_generic);
      s = add(s, shared_expert_sum(t, xs[t], r, ctx.training));
      s = add(s, scale_per_sample(specific[t](xs[t]), r.scale));
      out.features.push_back(s);
      out.routes.push_back(std::move(r));
    }
    return out;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t t = 0; t < num_tasks; ++t) projections[t].collect(prefix + ".proj" + std::to_string(t), out);
    generic.conv.collect(prefix + ".generic", out);
    for (std::size_t e = 0; e < shared.size(); ++e) shared[e].collect(prefix + ".expert" + std::to_string(e), out);
    for (std::size_t t = 0; t < num_tasks; ++t) {
      routers[t].collect(prefix + ".router" + std::to_string(t), out);
      expert_bn[t].collect(prefix + ".expert_bn" + std::to_string(t), out);
      specific[t].collect(prefix + ".specific" + std::to_string(t), out);
    }
  }
};

/// BatchNorm -> GELU -> 1x1 linear, channel preserving.
template <typename T>
struct NonlinearBlock {
  BatchNorm2d<T> bn;
  Conv2d<T> linear;

  NonlinearBlock() = default;
  explicit NonlinearBlock(std::size_t channels) : bn(channels), linear(1, channels, channels) {}

  void init(Rng& rng) { linear.init(rng); }
  Var<T> operator()(const Var<T>& x, bool training) { return linear(gelu(bn(x, training))); }
  void collect(const std::string& prefix, ParamList<T>& out) {
    bn.collect(prefix + ".bn", out);
    linear.collect(prefix + ".linear", out);
  }
};

/// Pixel-wise softmax mask over scales computed from the concatenated
/// features; output is the mask-weighted sum of the per-scale features.
template <typename T>
struct MultiscaleFuse {
  Conv2d<T> mask;  // (1, 1, S*C, S)

  MultiscaleFuse() = default;
  MultiscaleFuse(std::size_t scales, std::size_t channels) : mask(1, scales * channels, scales) {}

  std::size_t scales() const { return mask.out_channels(); }
  void init(Rng& rng) { mask.init(rng); }

  Var<T> operator()(const std::vector<Var<T>>& features) const {
    if (features.size() != scales()) {
      throw ContractError("multiscale_fuse: expected " + std::to_string(scales()) + " scales, got " +
                          std::to_string(features.size()));
    }
    Var<T> w = softmax_channels(mask(concat_channels(features)));
    Var<T> out;
    for (std::size_t s = 0; s < features.size(); ++s) {
      Var<T> term = mul_plane(features[s], slice_channels(w, s, s + 1));
      out = out.valid() ? add(out, term) : term;
    }
    return out;
  }
  void collect(const std::string& prefix, ParamList<T>& out) const { mask.collect(prefix + ".mask", out); }
};

}  // namespace mlore

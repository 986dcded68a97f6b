#pragma once

#include <string>
#include <vector>

#include "mlore/reparam.hpp"
#include "mlore/tasks.hpp"

namespace mlore {

// mlore: the full decoder. linear: the same scaffold with every MLoRE module
// replaced by per-task projections and one shared 3x3 conv (no experts, no
// routing); the shared-linear baseline.
enum class DecoderKind { mlore, linear };

inline const char* decoder_kind_name(DecoderKind k) { return k == DecoderKind::mlore ? "mlore" : "linear"; }
inline DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "mlore") return DecoderKind::mlore;
  if (s == "linear") return DecoderKind::linear;
  throw ContractError("unknown decoder kind '" + s + "' (expected mlore or linear)");
}

template <typename T>
struct LinearModule {
  std::vector<Conv2d<T>> projections;
  Conv2d<T> conv;

  LinearModule() = default;
  LinearModule(std::size_t tasks, std::size_t in_channels, std::size_t channels) : conv(3, channels, channels) {
    for (std::size_t t = 0; t < tasks; ++t) projections.emplace_back(1, in_channels, channels);
  }
  void init(Rng& rng) {
    for (auto& p : projections) p.init(rng);
    conv.init(rng);
  }
  std::vector<Var<T>> forward(const std::vector<Var<T>>& inputs) const {
    std::vector<Var<T>> out;
    for (std::size_t t = 0; t < projections.size(); ++t) {
      out.push_back(conv(projections[t](inputs.size() == 1 ? inputs[0] : inputs[t])));
    }
    return out;
  }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t t = 0; t < projections.size(); ++t) projections[t].collect(prefix + ".proj" + std::to_string(t), out);
    conv.collect(prefix + ".conv", out);
  }
};

template <typename T>
struct DecoderOutput {
  std::vector<Var<T>> predictions;                     // per task, at decoder resolution
  std::vector<std::vector<RouteResult<T>>> routes;     // per MLoRE module, per task
};

/// Per scale: stack_per_scale modules, each followed by one nonlinear block
/// per task. Across scales: per-task multiscale fusion. Per task: a 1x1 head.
template <typename T>
struct Decoder {
  ModelConfig cfg;
  DecoderKind kind = DecoderKind::mlore;
  std::vector<TaskSpec> specs;
  std::vector<MLoREModule<T>> modules;   // index scale * stack_per_scale + j
  std::vector<LinearModule<T>> linears;  // same indexing, linear decoder only
  std::vector<std::vector<NonlinearBlock<T>>> blocks;
  std::vector<MultiscaleFuse<T>> fuse;  // per task, empty when scales == 1
  std::vector<Conv2d<T>> heads;

  Decoder() = default;
  Decoder(const ModelConfig& c, DecoderKind k, std::size_t in_channels, std::size_t h, std::size_t w)
      : cfg(c), kind(k), specs(task_specs(c.tasks)) {
    cfg.validate();
    const std::size_t ch = cfg.channels, t = cfg.num_tasks();
    for (std::size_t s = 0; s < cfg.scales; ++s) {
      for (std::size_t j = 0; j < cfg.stack_per_scale; ++j) {
        const std::size_t in = j == 0 ? in_channels : ch;
        if (kind == DecoderKind::mlore) {
          modules.emplace_back(cfg, in, h, w, s * cfg.stack_per_scale + j);
        } else {
          linears.emplace_back(t, in, ch);
        }
        blocks.emplace_back();
        for (std::size_t i = 0; i < t; ++i) blocks.back().emplace_back(ch);
      }
    }
    if (cfg.scales > 1)
      for (std::size_t i = 0; i < t; ++i) fuse.emplace_back(cfg.scales, ch);
    for (const auto& sp : specs) heads.emplace_back(1, ch, sp.out_channels);
  }

  std::size_t num_modules() const { return cfg.scales * cfg.stack_per_scale; }

  void init(Rng& rng) {
    for (auto& m : modules) m.init(rng);
    for (auto& m : linears) m.init(rng);
    for (auto& bs : blocks)
      for (auto& b : bs) b.init(rng);
    for (auto& f : fuse) f.init(rng);
    for (auto& h : heads) h.init(rng);
  }

  /// `features` holds one backbone map per scale. With `fused` set, MLoRE
  /// modules run through their re-parameterized single convs (eval only).
  DecoderOutput<T> forward(const std::vector<Var<T>>& features, const ForwardContext& ctx) {
    if (features.size() != cfg.scales) {
      throw ContractError("decoder: expected " + std::to_string(cfg.scales) + " scale features, got " +
                          std::to_string(features.size()));
    }
    if (ctx.fused && ctx.training) throw ContractError("decoder: fused forward is inference-only");
    if (ctx.fused)
      for (auto& m : modules)
        for (auto& bn : m.expert_bn) bn.stats.training = false;
    DecoderOutput<T> out;
    const std::size_t t = cfg.num_tasks();
    std::size_t finest = 0;
    for (const auto& f : features) finest = std::max(finest, f.shape()[2]);
    std::vector<std::vector<Var<T>>> per_scale(t);
    for (std::size_t s = 0; s < cfg.scales; ++s) {
      std::vector<Var<T>> inputs{features[s]};
      for (std::size_t j = 0; j < cfg.stack_per_scale; ++j) {
        const std::size_t idx = s * cfg.stack_per_scale + j;
        std::vector<Var<T>> task_features;
        if (kind == DecoderKind::mlore) {
          ModuleOutput<T> mo =
              ctx.fused ? fused_module_forward(modules[idx], inputs) : modules[idx].forward(inputs, ctx);
          task_features = std::move(mo.features);
          out.routes.push_back(std::move(mo.routes));
        } else {
          task_features = linears[idx].forward(inputs);
        }
        inputs.clear();
        for (std::size_t i = 0; i < t; ++i) inputs.push_back(blocks[idx][i](task_features[i], ctx.training));
      }
      for (std::size_t i = 0; i < t; ++i) {
        const std::size_t f = finest / inputs[i].shape()[2];
        per_scale[i].push_back(f > 1 ? upsample_nearest(inputs[i], f) : inputs[i]);
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      Var<T> fused = cfg.scales > 1 ? fuse[i](per_scale[i]) : per_scale[i][0];
      out.predictions.push_back(heads[i](fused));
    }
    return out;
  }

  /// Sum over MLoRE modules of the per-module balancing loss; a zero
  /// constant for the linear decoder.
  Var<T> balancing_loss(const DecoderOutput<T>& out) const {
    Var<T> total(Tensor<T>({1, 1, 1, 1}));
    for (const auto& r : out.routes) total = add(total, load_balancing_loss(r, cfg.lb_weight));
    return total;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < modules.size(); ++i) modules[i].collect(prefix + ".module" + std::to_string(i), out);
    for (std::size_t i = 0; i < linears.size(); ++i) linears[i].collect(prefix + ".module" + std::to_string(i), out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      for (std::size_t t = 0; t < blocks[i].size(); ++t)
        blocks[i][t].collect(prefix + ".block" + std::to_string(i) + "." + std::to_string(t), out);
    for (std::size_t i = 0; i < fuse.size(); ++i) fuse[i].collect(prefix + ".fuse" + std::to_string(i), out);
    for (std::size_t i = 0; i < heads.size(); ++i) heads[i].collect(prefix + ".head." + specs[i].name, out);
  }
};

/// Patch embedding (space-to-depth by 4, then 1x1 conv: a stride-4 4x4 conv)
/// followed by four residual conv3x3-GELU stages, tapped after each stage.
template <typename T>
struct ToyBackbone {
  static constexpr std::size_t kPatch = 4;
  static constexpr std::size_t kStages = 4;
  Conv2d<T> embed;
  std::vector<Conv2d<T>> stages;

  ToyBackbone() = default;
  explicit ToyBackbone(std::size_t width) : embed(1, 3 * kPatch * kPatch, width) {
    for (std::size_t i = 0; i < kStages; ++i) stages.emplace_back(3, width, width);
  }

  std::size_t width() const { return embed.out_channels(); }
  void init(Rng& rng) {
    embed.init(rng);
    for (auto& s : stages) s.init(rng);
  }

  std::vector<Var<T>> operator()(const Var<T>& image) const {
    const Shape s = image.shape();
    if (s[1] != 3) throw ContractError("backbone: expected 3-channel images, got " + to_string(s));
    if (s[2] < kPatch || s[3] < kPatch || s[2] % kPatch || s[3] % kPatch) {
      throw ContractError("backbone: image size must be a positive multiple of 4, got " + to_string(s));
    }
    Var<T> x = embed(space_to_depth(image, kPatch));
    std::vector<Var<T>> taps;
    for (const auto& st : stages) {
      x = add(x, gelu(st(x)));
      taps.push_back(x);
    }
    return taps;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    embed.collect(prefix + ".embed", out);
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].collect(prefix + ".stage" + std::to_string(i), out);
  }
};

/// Backbone + decoder. The last `scales` backbone stages feed the decoder.
template <typename T>
struct MultiTaskModel {
  ModelConfig cfg;
  DecoderKind kind = DecoderKind::mlore;
  std::size_t backbone_width = 32;
  std::size_t image_size = 64;
  ToyBackbone<T> backbone;
  Decoder<T> decoder;

  MultiTaskModel() = default;
  MultiTaskModel(const ModelConfig& c, DecoderKind k, std::size_t width, std::size_t image)
      : cfg(c), kind(k), backbone_width(width), image_size(image), backbone(width) {
    if (c.scales > ToyBackbone<T>::kStages) throw ContractError("config: scales must be <= 4 for the toy backbone");
    if (image % ToyBackbone<T>::kPatch) throw ContractError("model: image size must be a multiple of 4");
    const std::size_t f = image / ToyBackbone<T>::kPatch;
    decoder = Decoder<T>(c, k, width, f, f);
  }

  /// Deterministic initialization from the config seed.
  void init() {
    Rng rng(derive_seed(cfg.seed, "init", 0));
    backbone.init(rng);
    decoder.init(rng);
  }

  DecoderOutput<T> forward(const Var<T>& images, const ForwardContext& ctx) {
    std::vector<Var<T>> taps = backbone(images);
    std::vector<Var<T>> used(taps.end() - static_cast<std::ptrdiff_t>(cfg.scales), taps.end());
    return decoder.forward(used, ctx);
  }

  ParamList<T> parameters() {
    ParamList<T> p;
    backbone.collect("backbone", p);
    decoder.collect("decoder", p);
    return p;
  }
};

}  // namespace mlore

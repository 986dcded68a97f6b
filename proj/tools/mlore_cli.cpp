// mlore: data generation, training, evaluation, re-parameterization checks,
// cost accounting and activation export for the MLoRE toy decoder.
//
// Exit codes: 0 ok / PASS, 1 verification FAIL or failed run, 2 usage, 3 I/O.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlore/accounting.hpp"
#include "mlore/activations.hpp"
#include "mlore/reparam.hpp"

#ifndef MLORE_VERSION
#define MLORE_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace mlore;

namespace {

enum Exit { kOk = 0, kFail = 1, kUsage = 2, kIo = 3 };

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One per command. Only started_at / finished_at vary between identical runs.
struct RunManifest {
  RunManifest(std::string cmd, std::map<std::string, nlohmann::json> f) : command(std::move(cmd)), flags(std::move(f)) {}

  std::string command;
  std::map<std::string, nlohmann::json> flags;
  std::optional<ModelConfig> config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> artifacts;
  std::string started_at = utc_now();

  void write(const std::string& path) const {
    nlohmann::json j{{"tool", "mlore"},
                     {"version", MLORE_VERSION},
                     {"command", command},
                     {"flags", flags},
                     {"artifacts", artifacts},
                     {"started_at", started_at},
                     {"finished_at", utc_now()}};
    if (config) j["config"] = config->to_json();
    if (seed) j["seed"] = *seed;
    write_text(path, j.dump(2) + "\n");
  }
};

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 0;
  std::size_t count = 64;
  std::size_t size = 64;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunManifest man{"gen-data", {{"seed", a.seed}, {"count", a.count}, {"size", a.size}, {"out", a.out}}};
  man.seed = a.seed;
  ensure_parent(a.out);
  save_dataset(gen_dataset(a.seed, a.count, a.size, a.size), a.out);
  man.artifacts = {a.out};
  man.write(a.out + ".manifest.json");
  std::cout << "wrote " << a.count << " samples (" << a.size << "x" << a.size << ") to " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::size_t iters = 1000;
  std::string out;
  std::string decoder = "mlore";
  std::size_t batch = 2;
  double lr = 1e-3;
  std::size_t checkpoint_every = 0;
  std::size_t backbone_width = 32;
  std::optional<std::uint64_t> seed;
  std::size_t log_every = 0;
};

int cmd_train(const TrainArgs& a) {
  ModelConfig cfg = a.config.empty() ? ModelConfig{} : ModelConfig::load(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const DecoderKind kind = parse_decoder_kind(a.decoder);
  const Dataset data = load_dataset(a.data);
  if (data.height != data.width) throw ContractError("train: square images required");
  RunManifest man{"train",
                  {{"config", a.config},
                   {"data", a.data},
                   {"iters", a.iters},
                   {"out", a.out},
                   {"decoder", a.decoder},
                   {"batch", a.batch},
                   {"lr", a.lr},
                   {"checkpoint_every", a.checkpoint_every},
                   {"backbone_width", a.backbone_width}}};
  man.config = cfg;
  man.seed = cfg.seed;
  ensure_dir(a.out);

  MultiTaskModel<float> model(cfg, kind, a.backbone_width, data.height);
  model.init();
  TrainOptions opt;
  opt.iterations = a.iters;
  opt.batch_size = a.batch;
  opt.lr = a.lr;
  opt.checkpoint_every = a.checkpoint_every;
  opt.checkpoint_dir = a.out;
  opt.log_every = a.log_every;
  const TrainResult r = train(model, data, opt, a.log_every ? &std::cerr : nullptr);

  const std::string ckpt = join(a.out, "model.ckpt"), curve = join(a.out, "loss_curve.csv");
  save_checkpoint(model, a.iters, ckpt);
  write_text(curve, format_curve_csv(r.curve, cfg.tasks));
  man.artifacts = r.checkpoints;
  man.artifacts.push_back(ckpt);
  man.artifacts.push_back(curve);
  man.write(join(a.out, "manifest.json"));
  if (!r.curve.empty()) {
    std::printf("trained %zu iterations: total loss %.5f -> %.5f\n", a.iters, r.curve.front().total,
                r.curve.back().total);
  } else {
    std::printf("0 iterations: checkpoint holds the initialization\n");
  }
  std::cout << "checkpoint " << ckpt << "\n";
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::vector<std::string> baselines;
  std::string out;
  std::string manifest;
  bool fused = false;
};

int cmd_eval(const EvalArgs& a) {
  LoadedModel<float> lm = load_checkpoint<float>(a.ckpt);
  const Dataset data = load_dataset(a.data);
  EvalOptions opt;
  opt.fused = a.fused;
  MetricsReport rep = evaluate(lm.model, data, opt);
  if (!a.baselines.empty()) {
    // Single-task reports are merged by task name.
    MetricsReport base;
    for (const auto& path : a.baselines) {
      MetricsReport b;
      try {
        b = MetricsReport::from_json(nlohmann::json::parse(read_text(path)));
      } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": bad metrics report: " + e.what());
      }
      for (std::size_t i = 0; i < b.tasks.size(); ++i) {
        base.tasks.push_back(b.tasks[i]);
        base.values.push_back(b.values[i]);
      }
    }
    rep.delta_m = delta_m(rep, base);
  }
  std::cout << rep.format();
  RunManifest man{"eval", {{"ckpt", a.ckpt}, {"data", a.data}, {"baseline", a.baselines}, {"out", a.out},
                           {"fused", a.fused}}};
  man.config = lm.header.config;
  man.seed = lm.header.config.seed;
  if (!a.out.empty()) {
    ensure_parent(a.out);
    write_text(a.out, rep.to_json().dump(2) + "\n");
    man.artifacts = {a.out};
  }
  const std::string mpath = !a.manifest.empty() ? a.manifest : !a.out.empty() ? a.out + ".manifest.json" : "";
  if (!mpath.empty()) man.write(mpath);
  return kOk;
}

struct VerifyArgs {
  std::size_t trials = 100;
  std::string precision = "double";
  std::string config;
  std::uint64_t seed = 0;
  bool corrupt = false;
  std::string manifest;
};

template <typename T>
EquivalenceReport run_verify(const VerifyArgs& a) {
  std::vector<ModelConfig> configs =
      a.config.empty() ? equivalence_sweep_configs() : std::vector<ModelConfig>{ModelConfig::load(a.config)};
  EquivalenceOptions opt;
  opt.seed = a.seed;
  opt.corrupt_fused_bias = a.corrupt;
  return verify_equivalence<T>(configs, a.trials, opt);
}

int cmd_verify_reparam(const VerifyArgs& a) {
  if (a.precision != "double" && a.precision != "single") throw ContractError("--precision must be double or single");
  const EquivalenceReport r = a.precision == "double" ? run_verify<double>(a) : run_verify<float>(a);
  std::printf("verify-reparam %s: %zu trials, max relative error %.3e (tolerance %.0e), %.2fs\n", r.precision.c_str(),
              r.trials.size(), r.max_relative_error, r.tolerance, r.seconds);
  std::printf("%s\n", r.pass ? "PASS" : "FAIL");
  if (!a.manifest.empty()) {
    RunManifest man{"verify-reparam", {{"trials", a.trials}, {"precision", a.precision}, {"config", a.config},
                                       {"seed", a.seed}, {"corrupt_fused_bias", a.corrupt}}};
    man.seed = a.seed;
    man.write(a.manifest);
  }
  return r.pass ? kOk : kFail;
}

struct CountArgs {
  std::string config;
  std::size_t hw = 16;
  std::size_t expert_kernel = 3;
  bool unfused = false;
  std::string json;
  std::string manifest;
};

int cmd_count(const CountArgs& a) {
  const ModelConfig cfg = a.config.empty() ? full_scale_config() : ModelConfig::load(a.config);
  AccountingOptions opt;
  opt.height = opt.width = a.hw;
  opt.expert_kernel = a.expert_kernel;
  opt.fused = !a.unfused;
  if (a.expert_kernel != 1 && a.expert_kernel != 3) throw ContractError("--expert-kernel must be 1 or 3");
  std::printf("decoder cost, C=%zu, %zux%zu features, %zu tasks (1 MAC = 2 FLOPs, backbone excluded)\n\n",
              cfg.channels, a.hw, a.hw, cfg.num_tasks());
  const auto rows = compare_table(cfg, opt);
  std::cout << format_table(rows) << "\n";
  nlohmann::json j{{"flop_convention", "1 MAC = 2 FLOPs"}, {"config", cfg.to_json()}, {"table", nlohmann::json::array()}};
  for (const auto& r : rows) {
    j["table"].push_back({{"num_experts", r.num_experts}, {"expert_kernel", r.expert_kernel},
                          {"variant", variant_name(r.variant)}, {"top_k", r.top_k}, {"params", r.params},
                          {"flops", r.flops}});
  }
  for (Variant v : {Variant::standard_moe, Variant::mlore}) {
    const CostReport p = count_params(cfg, v, opt), f = count_flops(cfg, v, opt);
    std::printf("%s breakdown (N=%zu, k=%zu)\n", variant_name(v), cfg.num_experts, cfg.top_k);
    nlohmann::json b;
    for (const auto& [name, value] : f.breakdown) {
      std::uint64_t params = 0;
      for (const auto& [pn, pv] : p.breakdown)
        if (pn == name) params = pv;
      std::printf("  %-18s params %14llu  FLOPs %16llu\n", name.c_str(), static_cast<unsigned long long>(params),
                  static_cast<unsigned long long>(value));
      b[name] = {{"params", params}, {"flops", value}};
    }
    std::printf("  %-18s params %14llu  FLOPs %16llu\n", "total", static_cast<unsigned long long>(p.total()),
                static_cast<unsigned long long>(f.total()));
    j["breakdown"][variant_name(v)] = b;
  }
  RunManifest man{"count", {{"config", a.config}, {"hw", a.hw}, {"expert_kernel", a.expert_kernel},
                            {"unfused", a.unfused}, {"json", a.json}}};
  man.config = cfg;
  if (!a.json.empty()) {
    ensure_parent(a.json);
    write_text(a.json, j.dump(2) + "\n");
    man.artifacts = {a.json};
  }
  if (!a.manifest.empty()) man.write(a.manifest);
  return kOk;
}

struct ExportArgs {
  std::string ckpt;
  std::string data;
  std::string out;
};

int cmd_export_activations(const ExportArgs& a) {
  LoadedModel<float> lm = load_checkpoint<float>(a.ckpt);
  const Dataset data = load_dataset(a.data);
  const ActivationStats s = export_activations(lm.model, data);
  ensure_dir(a.out);
  const std::string rows = join(a.out, "activations.csv"), co = join(a.out, "tasks_per_expert.csv");
  write_text(rows, format_activation_csv(s));
  write_text(co, format_coactivation_csv(s));
  RunManifest man{"export-activations", {{"ckpt", a.ckpt}, {"data", a.data}, {"out", a.out}}};
  man.config = lm.header.config;
  man.seed = lm.header.config.seed;
  man.artifacts = {rows, co};
  man.write(join(a.out, "manifest.json"));
  std::printf("%zu activation rows, minimum expert activation frequency %.4f\n", s.rows.size(),
              min_activation_frequency(s));
  std::cout << "wrote " << rows << " and " << co << "\n";
  return kOk;
}

struct BenchArgs {
  std::string config;
  std::size_t batch = 4;
  std::size_t hw = 16;
  std::size_t reps = 5;
  bool frozen = false;
};

int cmd_bench(const BenchArgs& a) {
  ModelConfig cfg = a.config.empty() ? ModelConfig{} : ModelConfig::load(a.config);
  MLoREModule<float> m(cfg, cfg.channels, a.hw, a.hw);
  Rng rng(derive_seed(cfg.seed, "bench", 0));
  randomize_for_equivalence(m, rng);
  Tensor<float> x({a.batch, cfg.channels, a.hw, a.hw});
  fill_uniform(x, rng, 1.0);
  const std::vector<Var<float>> in{Var<float>(x)};
  using clock = std::chrono::steady_clock;
  auto time_ms = [&](auto&& fn) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < a.reps; ++i) fn();
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count() / double(a.reps);
  };
  ModuleOutput<float> ref;
  const double multi = time_ms([&] {
    NoGradGuard g;
    ref = m.forward(in, ForwardContext{});
  });
  const double routed = time_ms([&] { fused_module_forward(m, in); });
  std::printf("module C=%zu N=%zu k=%zu, batch %zu at %zux%zu, %zu reps\n", cfg.channels, cfg.num_experts, cfg.top_k,
              a.batch, a.hw, a.hw, a.reps);
  std::printf("  multi-branch eval        %9.3f ms\n", multi);
  std::printf("  fused per (task, sample) %9.3f ms (exact)\n", routed);
  if (a.frozen) {
    std::vector<FusedConv<float>> frozen;
    const double fold = time_ms([&] { frozen = fuse_frozen(m, in); });
    std::vector<Tensor<float>> ys(m.num_tasks);
    const double conv = time_ms([&] {
      NoGradGuard g;
      const auto xs = m.project_tasks(in);
      for (std::size_t t = 0; t < m.num_tasks; ++t) ys[t] = fused_forward(xs[t].value(), frozen[t]);
    });
    double dev = 0;
    for (std::size_t t = 0; t < m.num_tasks; ++t) dev = std::max(dev, max_relative_error(ys[t], ref.features[t].value()));
    std::printf("  frozen-gates fused conv  %9.3f ms (+%.3f ms one-off fold)\n", conv, fold);
    std::printf("  NOT EQUIVALENT: batch-averaged gates, max relative deviation %.3e\n", dev);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MLoRE multi-task decoder toolkit"};
  const auto positive = CLI::Range(1, 1 << 30);
  app.require_subcommand(1);
  app.set_version_flag("--version", MLORE_VERSION);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  gen->add_option("--seed", gd.seed, "dataset seed");
  gen->add_option("--count", gd.count, "number of samples")->check(positive);
  gen->add_option("--size", gd.size, "image height and width (>= 16)")->check(CLI::Range(16, 4096));
  gen->add_option("--out", gd.out, "dataset file")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model; writes model.ckpt, loss_curve.csv, manifest.json");
  tr->add_option("--config", ta.config, "model config JSON (defaults when omitted)");
  tr->add_option("--data", ta.data, "dataset file")->required();
  tr->add_option("--iters", ta.iters, "training iterations");
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--decoder", ta.decoder, "mlore or linear")->check(CLI::IsMember({"mlore", "linear"}));
  tr->add_option("--batch", ta.batch, "batch size")->check(positive);
  tr->add_option("--lr", ta.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "extra checkpoint every N steps (0: none)");
  tr->add_option("--backbone-width", ta.backbone_width, "toy backbone channels")->check(positive);
  tr->add_option("--seed", ta.seed, "override the config seed");
  tr->add_option("--log-every", ta.log_every, "progress line on stderr every N steps");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; delta_m when baselines are given");
  ev->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  ev->add_option("--data", ea.data, "dataset file")->required();
  ev->add_option("--baseline", ea.baselines, "baseline metrics JSON (repeatable; merged by task)");
  ev->add_option("--out", ea.out, "write the metrics report as JSON");
  ev->add_option("--manifest", ea.manifest, "manifest path (default <out>.manifest.json)");
  ev->add_flag("--fused", ea.fused, "run MLoRE modules through the re-parameterized convs");

  VerifyArgs va;
  auto* vr = app.add_subcommand("verify-reparam", "multi-branch vs fused forward on random modules");
  vr->add_option("--trials", va.trials, "number of random modules")->check(positive);
  vr->add_option("--precision", va.precision, "double or single")->check(CLI::IsMember({"double", "single"}));
  vr->add_option("--config", va.config, "use this config for every trial (default: sweep grid)");
  vr->add_option("--seed", va.seed, "trial seed");
  vr->add_flag("--corrupt-fused-bias", va.corrupt, "test hook: perturb the fused bias (must FAIL)");
  vr->add_option("--manifest", va.manifest, "manifest path");

  CountArgs ca;
  auto* co = app.add_subcommand("count", "parameter / FLOP accounting table");
  co->add_option("--config", ca.config, "config JSON (default: C=384 full-scale config)");
  co->add_option("--hw", ca.hw, "feature map side length")->check(positive);
  co->add_option("--expert-kernel", ca.expert_kernel, "first expert conv for the breakdown: 1 or 3");
  co->add_flag("--unfused", ca.unfused, "count MLoRE FLOPs without re-parameterization");
  co->add_option("--json", ca.json, "also write the table as JSON");
  co->add_option("--manifest", ca.manifest, "manifest path");

  ExportArgs xa;
  auto* ex = app.add_subcommand("export-activations", "per-expert activation statistics");
  ex->add_option("--ckpt", xa.ckpt, "checkpoint file")->required();
  ex->add_option("--data", xa.data, "dataset file")->required();
  ex->add_option("--out", xa.out, "output directory")->required();

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "latency of multi-branch vs fused module forward");
  be->add_option("--config", ba.config, "config JSON");
  be->add_option("--batch", ba.batch, "batch size")->check(positive);
  be->add_option("--hw", ba.hw, "feature map side length")->check(positive);
  be->add_option("--reps", ba.reps, "repetitions")->check(positive);
  be->add_flag("--frozen-gates", ba.frozen, "also time one conv per task with batch-averaged gates (non-equivalent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gd);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*vr) return cmd_verify_reparam(va);
    if (*co) return cmd_count(ca);
    if (*ex) return cmd_export_activations(xa);
    if (*be) return cmd_bench(ba);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFail;
  }
  return kUsage;
}

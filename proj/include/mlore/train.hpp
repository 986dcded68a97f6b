#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mlore/checkpoint.hpp"
#include "mlore/losses.hpp"
#include "mlore/metrics.hpp"

namespace mlore {

/// Adam with bias correction; state is created lazily per parameter.
template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamList<T>& params) {
    ++t_;
    if (m_.empty()) {
      for (const auto& [name, v] : params.params) {
        m_.emplace_back(v.shape());
        v_.emplace_back(v.shape());
      }
    }
    const double c1 = 1 - std::pow(b1_, double(t_)), c2 = 1 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params.params.size(); ++i) {
      Var<T>& p = params.params[i].second;
      if (!p.has_grad()) continue;
      const Tensor<T> g = p.grad();
      Tensor<T>& value = p.mutable_value();
      for (std::size_t j = 0; j < value.size(); ++j) {
        m_[i][j] = static_cast<T>(b1_ * m_[i][j] + (1 - b1_) * g[j]);
        v_[i][j] = static_cast<T>(b2_ * v_[i][j] + (1 - b2_) * g[j] * g[j]);
        value[j] -= static_cast<T>(lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

struct TrainOptions {
  std::size_t iterations = 1000;
  std::size_t batch_size = 2;
  double lr = 1e-3;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string checkpoint_dir;        // empty: no checkpoints written
  std::size_t log_every = 0;         // progress lines on `progress`; 0: silent
};

struct StepLog {
  std::size_t step = 0;
  double total = 0;
  std::vector<double> task;  // per task loss
  double balance = 0;        // load-balancing term (already weighted)
  double experts_used = 0;   // fraction of (module, expert) pairs routed to in this batch
};

struct TrainResult {
  std::vector<StepLog> curve;
  std::vector<std::string> checkpoints;
};

/// Sample indices of training step `step`: consecutive slices of per-epoch
/// permutations, each drawn from its own sub-stream of `seed`.
class BatchSchedule {
 public:
  BatchSchedule(std::uint64_t seed, std::size_t count, std::size_t batch) : seed_(seed), count_(count), batch_(batch) {
    if (count < 1 || batch < 1) throw ContractError("batch schedule: empty dataset or batch");
  }

  std::vector<std::size_t> operator()(std::size_t step) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < batch_; ++j) {
      const std::size_t pos = step * batch_ + j;
      idx.push_back(permutation(pos / count_)[pos % count_]);
    }
    return idx;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    auto it = perms_.find(epoch);
    if (it != perms_.end()) return it->second;
    if (perms_.size() > 4) perms_.erase(perms_.begin());
    std::vector<std::size_t> p(count_);
    for (std::size_t i = 0; i < count_; ++i) p[i] = i;
    Rng rng(derive_seed(seed_, "batches", epoch));
    for (std::size_t i = count_; i > 1; --i) std::swap(p[i - 1], p[std::size_t(rng.integer(0, std::int64_t(i) - 1))]);
    return perms_.emplace(epoch, std::move(p)).first->second;
  }

  std::uint64_t seed_;
  std::size_t count_, batch_;
  std::map<std::size_t, std::vector<std::size_t>> perms_;
};

template <typename T>
double experts_used_fraction(const DecoderOutput<T>& out, std::size_t num_experts) {
  if (out.routes.empty()) return 0;
  std::size_t used = 0;
  for (const auto& module : out.routes) {
    std::vector<bool> hit(num_experts, false);
    for (const auto& task : module)
      for (const auto& g : task.vectors)
        for (std::size_t e : g.active) hit[e] = true;
    for (bool h : hit) used += h;
  }
  return double(used) / double(out.routes.size() * num_experts);
}

inline std::string checkpoint_path(const std::string& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06zu.ckpt", step);
  return (std::filesystem::path(dir) / name).string();
}

/// Trains in place. Routing noise for step s comes from the "routing-noise"
/// stream of (seed, s). A non-finite loss or gradient aborts the run; the
/// pre-step parameters (the last good state) are written to
/// <checkpoint_dir>/last_good.ckpt when a directory is set.
template <typename T>
TrainResult train(MultiTaskModel<T>& model, const Dataset& data, const TrainOptions& opt,
                  std::ostream* progress = nullptr) {
  if (data.height != model.image_size || data.width != model.image_size) {
    throw ContractError("train: dataset is " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                        ", model expects " + std::to_string(model.image_size));
  }
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);
  const std::vector<TaskSpec> specs = task_specs(model.cfg.tasks);
  ParamList<T> params = model.parameters();
  Adam<T> adam(opt.lr);
  BatchSchedule schedule(model.cfg.seed, data.size(), opt.batch_size);
  TrainResult result;
  for (std::size_t step = 0; step < opt.iterations; ++step) {
    const Batch<T> batch = make_batch<T>(data, schedule(step));
    ForwardContext ctx;
    ctx.training = true;
    ctx.noise = model.cfg.noise;
    ctx.noise_seed = derive_seed(model.cfg.seed, "routing-noise", step);
    StepLog log;
    log.step = step;
    try {
      DecoderOutput<T> out = model.forward(Var<T>(batch.images), ctx);
      TaskLosses<T> losses = task_losses(out.predictions, batch, specs);
      Var<T> balance = model.decoder.balancing_loss(out);
      Var<T> total = add(losses.total, balance);
      log.total = double(total.value()[0]);
      for (const auto& l : losses.per_task) log.task.push_back(double(l.value()[0]));
      log.balance = double(balance.value()[0]);
      log.experts_used = experts_used_fraction(out, model.cfg.num_experts);
      if (!std::isfinite(log.total)) throw NumericError("total loss is " + std::to_string(log.total));
      params.zero_grad();
      backward(total);
      for (const auto& [name, v] : params.params)
        if (v.has_grad()) require_finite(v.grad(), "gradient of " + name);
    } catch (const NumericError& e) {
      std::string where;
      if (!opt.checkpoint_dir.empty()) {
        where = (std::filesystem::path(opt.checkpoint_dir) / "last_good.ckpt").string();
        save_checkpoint(model, step, where);
        where = "; last good state saved to " + where;
      }
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what() + where);
    }
    adam.step(params);
    result.curve.push_back(std::move(log));
    if (progress && opt.log_every && (step % opt.log_every == 0 || step + 1 == opt.iterations)) {
      char line[96];
      std::snprintf(line, sizeof line, "step %zu total %.5f\n", step, result.curve.back().total);
      *progress << line << std::flush;
    }
    if (!opt.checkpoint_dir.empty() && opt.checkpoint_every && (step + 1) % opt.checkpoint_every == 0 &&
        step + 1 < opt.iterations) {
      result.checkpoints.push_back(checkpoint_path(opt.checkpoint_dir, step + 1));
      save_checkpoint(model, step + 1, result.checkpoints.back());
    }
  }
  return result;
}

/// step,total,<task>...,balance,experts_used
inline std::string format_curve_csv(const std::vector<StepLog>& curve, const std::vector<std::string>& tasks) {
  std::string out = "step,total";
  for (const auto& t : tasks) out += "," + t;
  out += ",balance,experts_used\n";
  char cell[40];
  for (const auto& s : curve) {
    out += std::to_string(s.step);
    std::snprintf(cell, sizeof cell, ",%.9g", s.total);
    out += cell;
    for (double v : s.task) {
      std::snprintf(cell, sizeof cell, ",%.9g", v);
      out += cell;
    }
    std::snprintf(cell, sizeof cell, ",%.9g,%.6f\n", s.balance, s.experts_used);
    out += cell;
  }
  return out;
}

struct EvalOptions {
  std::size_t batch_size = 8;
  bool fused = false;  // run MLoRE modules through their re-parameterized convs
};

/// Per-task predictions upsampled to the image resolution, eval mode.
template <typename T>
std::vector<Tensor<T>> predict(MultiTaskModel<T>& model, const Batch<T>& batch, bool fused = false) {
  NoGradGuard guard;
  ForwardContext ctx;
  ctx.fused = fused;
  DecoderOutput<T> out = model.forward(Var<T>(batch.images), ctx);
  std::vector<Tensor<T>> preds;
  for (const auto& p : out.predictions) {
    preds.push_back(upsample_nearest(p, batch.images.dim(2) / p.shape()[2]).value());
    require_finite(preds.back(), "prediction");
  }
  return preds;
}

template <typename T>
MetricsReport evaluate(MultiTaskModel<T>& model, const Dataset& data, const EvalOptions& opt = {}) {
  if (data.height != model.image_size || data.width != model.image_size) {
    throw ContractError("evaluate: dataset resolution does not match the model");
  }
  MetricAccumulator acc(task_specs(model.cfg.tasks));
  for (std::size_t start = 0; start < data.size(); start += opt.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + opt.batch_size); ++i) idx.push_back(i);
    const Batch<T> batch = make_batch<T>(data, idx);
    acc.add(predict(model, batch, opt.fused), batch);
  }
  return acc.report();
}

}  // namespace mlore

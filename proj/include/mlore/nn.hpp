#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mlore/ops.hpp"
#include "mlore/random.hpp"

namespace mlore {

/// Named views onto the trainable parameters and persistent buffers of a
/// model, in a stable order (checkpointing, optimizers, gradient checks).
template <typename T>
struct ParamList {
  std::vector<std::pair<std::string, Var<T>>> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  void add(std::string name, const Var<T>& v) { params.emplace_back(std::move(name), v); }
  void add_buffer(std::string name, Tensor<T>* t) { buffers.emplace_back(std::move(name), t); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params) n += v.value().size();
    return n;
  }
  void zero_grad() {
    for (auto& [name, v] : params) v.zero_grad();
  }
};

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

/// Weights (k, k, C_in, C_out) and bias (1, C_out, 1, 1) of one stride-1 conv.
template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;

  Conv2d() = default;
  Conv2d(std::size_t k, std::size_t cin, std::size_t cout)
      : weight(Var<T>::parameter(Tensor<T>({k, k, cin, cout}))),
        bias(Var<T>::parameter(Tensor<T>({1, cout, 1, 1}))) {}

  std::size_t kernel() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[2]; }
  std::size_t out_channels() const { return weight.shape()[3]; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
  void init(Rng& rng, double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(kernel() * kernel() * in_channels()));
    fill_uniform(weight.mutable_value(), rng, bound);
    fill_uniform(bias.mutable_value(), rng, bound);
  }
  void set_identity() {
    weight.mutable_value().fill(T(0));
    bias.mutable_value().fill(T(0));
    const std::size_t k = kernel(), c = std::min(in_channels(), out_channels());
    for (std::size_t i = 0; i < c; ++i) weight.mutable_value().at(k / 2, k / 2, i, i) = T(1);
  }
  void zero() {
    weight.mutable_value().fill(T(0));
    bias.mutable_value().fill(T(0));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.add(prefix + ".weight", weight);
    out.add(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  BatchNormStats<T> stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(Var<T>::parameter(Tensor<T>({1, channels, 1, 1}, T(1)))),
        beta(Var<T>::parameter(Tensor<T>({1, channels, 1, 1}, T(0)))),
        stats(channels) {}

  std::size_t channels() const { return gamma.value().size(); }

  Var<T> operator()(const Var<T>& x, bool training) {
    stats.training = training;
    return training ? batchnorm_train(x, gamma, beta, stats) : batchnorm_eval(x, gamma, beta, stats);
  }

  /// gamma / sqrt(running_var + eps) per channel (the eval-mode slope).
  std::vector<T> eval_scale() const {
    std::vector<T> s(channels());
    for (std::size_t c = 0; c < s.size(); ++c) s[c] = gamma.value()[c] / std::sqrt(stats.running_var[c] + stats.eps);
    return s;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.add(prefix + ".gamma", gamma);
    out.add(prefix + ".beta", beta);
    out.add_buffer(prefix + ".running_mean", &stats.running_mean);
    out.add_buffer(prefix + ".running_var", &stats.running_var);
  }
};

/// Linear layer over flattened spatial positions (HW -> 1); the input size is
/// fixed at construction.
template <typename T>
struct SpatialLinear {
  Var<T> weight;

  SpatialLinear() = default;
  SpatialLinear(std::size_t h, std::size_t w) : weight(Var<T>::parameter(Tensor<T>({1, 1, h, w}))) {}

  void init(Rng& rng) { fill_uniform(weight.mutable_value(), rng, 1.0 / std::sqrt(double(weight.value().size()))); }
  Var<T> operator()(const Var<T>& x) const { return spatial_linear(x, weight); }
  void collect(const std::string& prefix, ParamList<T>& out) const { out.add(prefix + ".weight", weight); }
};

}  // namespace mlore

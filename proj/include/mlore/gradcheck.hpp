#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mlore/nn.hpp"

namespace mlore {

struct GradCheckEntry {
  std::size_t param = 0;  // index into the parameter list
  std::size_t element = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::vector<GradCheckEntry> entries;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// on `samples` coordinates drawn uniformly (seeded) from `params`. Relative
/// error is |a - cd| / max(|a|, |cd|, 1e-12). `loss_fn` must rebuild its graph
/// on every call and be deterministic.
template <typename T>
GradCheckResult finite_difference_check(const std::function<Var<T>()>& loss_fn, std::vector<Var<T>> params,
                                        std::size_t samples, double step, std::uint64_t seed = 0) {
  if (!(step > 0)) throw ContractError("finite_difference_check: step must be positive");
  std::size_t total = 0;
  for (const auto& p : params) total += p.value().size();
  if (total == 0) throw ContractError("finite_difference_check: no parameters");

  for (auto& p : params) p.zero_grad();
  const Var<T> loss = loss_fn();
  const T base = loss.value()[0];
  backward(loss);
  {
    NoGradGuard guard;
    if (loss_fn().value()[0] != base) {
      throw ContractError("finite_difference_check: loss is not deterministic under a fixed seed");
    }
  }
  std::vector<Tensor<T>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  Rng rng(seed);
  GradCheckResult result;
  const std::size_t n = std::min(samples, total);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t flat = samples >= total ? s : static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(total) - 1));
    std::size_t pi = 0;
    while (flat >= params[pi].value().size()) flat -= params[pi++].value().size();
    Tensor<T>& v = params[pi].mutable_value();
    const T saved = v[flat];
    double plus = 0, minus = 0;
    {
      NoGradGuard guard;
      v[flat] = saved + static_cast<T>(step);
      plus = static_cast<double>(loss_fn().value()[0]);
      v[flat] = saved - static_cast<T>(step);
      minus = static_cast<double>(loss_fn().value()[0]);
      v[flat] = saved;
    }
    GradCheckEntry e;
    e.param = pi;
    e.element = flat;
    e.analytic = static_cast<double>(analytic[pi][flat]);
    e.numeric = (plus - minus) / (2.0 * step);
    e.relative_error =
        std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-12});
    result.max_relative_error = std::max(result.max_relative_error, e.relative_error);
    result.entries.push_back(e);
  }
  return result;
}

}  // namespace mlore

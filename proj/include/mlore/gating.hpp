#pragma once

#include <cmath>
#include <vector>

#include "mlore/ops.hpp"

namespace mlore {

/// One task's routing decision for one sample.
struct GateVector {
  std::vector<double> gates;        // length N, zero outside `active`
  std::vector<std::size_t> active;  // ascending, size k
  double scale = 0;                 // extra router output weighting the task-specific expert
};

/// Routing output of one task for a batch, kept as graph nodes so that the
/// gates and the load estimate can carry gradients into the router.
template <typename T>
struct RouteResult {
  Var<T> gates;  // (n, N, 1, 1)
  Var<T> scale;  // (n, 1, 1, 1)
  Var<T> load;   // (n, N, 1, 1): smooth activation probability, or 0/1 when noise is off
  std::vector<GateVector> vectors;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846); }

/// Probability that each expert stays in the top-k when its own noise is
/// resampled (noisy top-k load estimator). `noisy` holds the perturbed logits
/// actually used for selection; the thresholds taken from it are treated as
/// constants. Gradients flow to `clean` and `noise_std`.
template <typename T>
Var<T> noisy_topk_load(const Var<T>& clean, const Var<T>& noise_std, const Tensor<T>& noisy, std::size_t k) {
  const Shape s = clean.shape();
  const std::size_t n_exp = s[1];
  Tensor<T> out(s);
  Tensor<T> dclean(s), dstd(s);
  for (std::size_t n = 0; n < s[0]; ++n) {
    const T* v = noisy.data() + n * n_exp;
    if (k >= n_exp) {
      for (std::size_t e = 0; e < n_exp; ++e) out[n * n_exp + e] = T(1);
      continue;
    }
    std::vector<T> sorted(v, v + n_exp);
    std::sort(sorted.begin(), sorted.end(), std::greater<T>());
    const T threshold_if_in = sorted[k];       // (k+1)-th largest
    const T threshold_if_out = sorted[k - 1];  // k-th largest
    for (std::size_t e = 0; e < n_exp; ++e) {
      const std::size_t i = n * n_exp + e;
      const T thr = v[e] > threshold_if_in ? threshold_if_in : threshold_if_out;
      const T sd = noise_std.value()[i];
      const double z = static_cast<double>((clean.value()[i] - thr) / sd);
      out[i] = static_cast<T>(normal_cdf(z));
      const T pdf = static_cast<T>(normal_pdf(z));
      dclean[i] = pdf / sd;
      dstd[i] = -pdf * (clean.value()[i] - thr) / (sd * sd);
    }
  }
  return make_result<T>(std::move(out), {clean, noise_std}, [dclean, dstd](Node<T>& self) {
    Node<T>* cn = self.parents[0].get();
    Node<T>* sn = self.parents[1].get();
    if (cn->requires_grad) {
      Tensor<T>& g = cn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dclean[i];
    }
    if (sn->requires_grad) {
      Tensor<T>& g = sn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dstd[i];
    }
  });
}

/// lb_weight * (CV^2(importance) + CV^2(load)) over all routing results of one
/// module, where importance sums gates and load sums activation estimates
/// over batch and tasks.
template <typename T>
Var<T> load_balancing_loss(const std::vector<RouteResult<T>>& routes, double lb_weight) {
  if (routes.empty()) throw ContractError("load_balancing_loss: no gate vectors");
  Var<T> importance, load;
  for (const auto& r : routes) {
    Var<T> imp = sum_batch(r.gates);
    Var<T> ld = sum_batch(r.load);
    importance = importance.valid() ? add(importance, imp) : imp;
    load = load.valid() ? add(load, ld) : ld;
  }
  return scale(add(cv_squared(importance), cv_squared(load)), static_cast<T>(lb_weight));
}

/// Population squared coefficient of variation; 0 for a zero-mean vector.
inline double cv_squared_value(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (mean == 0) return 0;
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return var / (mean * mean);
}

/// Value-only form over plain gate vectors with the hard (noise-free) load:
/// load_n counts how often expert n is active.
inline double load_balancing_loss(const std::vector<GateVector>& gates, std::size_t num_experts, double lb_weight) {
  if (gates.empty()) throw ContractError("load_balancing_loss: no gate vectors");
  std::vector<double> importance(num_experts, 0.0), load(num_experts, 0.0);
  for (const auto& g : gates) {
    if (g.gates.size() != num_experts) throw ContractError("load_balancing_loss: gate length mismatch");
    for (std::size_t n = 0; n < num_experts; ++n) importance[n] += g.gates[n];
    for (std::size_t n : g.active) load[n] += 1.0;
  }
  return lb_weight * (cv_squared_value(importance) + cv_squared_value(load));
}

}  // namespace mlore

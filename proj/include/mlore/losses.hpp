#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlore/data.hpp"
#include "mlore/ops.hpp"
#include "mlore/tasks.hpp"

namespace mlore {

/// Non-finite values where a loss needs finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  std::size_t bad = 0, first = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) {
      if (bad++ == 0) first = i;
    }
  if (bad) {
    throw NumericError(what + ": " + std::to_string(bad) + " non-finite values of " + std::to_string(t.size()) +
                       " in tensor " + to_string(t.shape()) + ", first at flat index " + std::to_string(first));
  }
}

/// Mean over pixels of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<unsigned char>& labels) {
  const Shape s = logits.shape();
  const std::size_t hw = s[2] * s[3], pixels = s[0] * hw;
  detail::require(labels.size() == pixels, "cross_entropy: label count does not match logits " + to_string(s));
  Tensor<T> prob(s);
  double total = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t lab = labels[n * hw + p];
      detail::require(lab < s[1], "cross_entropy: label " + std::to_string(lab) + " out of range");
      T mx = logits.value()[n * s[1] * hw + p];
      for (std::size_t c = 1; c < s[1]; ++c) mx = std::max(mx, logits.value()[(n * s[1] + c) * hw + p]);
      T z = 0;
      for (std::size_t c = 0; c < s[1]; ++c) {
        const std::size_t i = (n * s[1] + c) * hw + p;
        prob[i] = std::exp(logits.value()[i] - mx);
        z += prob[i];
      }
      for (std::size_t c = 0; c < s[1]; ++c) prob[(n * s[1] + c) * hw + p] /= z;
      total += double(mx + std::log(z) - logits.value()[(n * s[1] + lab) * hw + p]);
    }
  const T value = static_cast<T>(total / double(pixels));
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, value), {logits}, [s, hw, pixels, prob, labels](Node<T>& self) {
    Tensor<T>& g = detail::grad_of(self.parents[0].get());
    const T k = self.grad[0] / static_cast<T>(pixels);
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t c = 0; c < s[1]; ++c)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (n * s[1] + c) * hw + p;
          g[i] += k * (prob[i] - (labels[n * hw + p] == c ? T(1) : T(0)));
        }
  });
}

/// Class-balanced binary cross-entropy on logits. Positives are weighted by
/// the negative fraction of the batch and vice versa; mean over pixels.
template <typename T>
Var<T> balanced_bce(const Var<T>& logits, const Tensor<T>& target) {
  logits.value().require_same_shape(target, "balanced_bce");
  const std::size_t n = target.size();
  double pos = 0;
  for (T t : target.values()) pos += double(t);
  const T beta = static_cast<T>((double(n) - pos) / double(n));  // weight of positives
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.value()[i], y = target[i];
    total += double(beta * y * softplus_value(-z) + (T(1) - beta) * (T(1) - y) * softplus_value(z));
  }
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, static_cast<T>(total / double(n))), {logits},
                        [target, beta, n](Node<T>& self) {
                          Node<T>* ln = self.parents[0].get();
                          Tensor<T>& g = detail::grad_of(ln);
                          const T k = self.grad[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T sg = sigmoid_value(ln->value[i]), y = target[i];
                            g[i] += k * (-beta * y * (T(1) - sg) + (T(1) - beta) * (T(1) - y) * sg);
                          }
                        });
}

/// sum(mask * |pred - target|) / sum(mask); 0 when the mask is empty.
template <typename T>
Var<T> masked_l1(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  pred.value().require_same_shape(target, "l1");
  pred.value().require_same_shape(mask, "l1 mask");
  double total = 0, weight = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    total += double(mask[i] * std::abs(pred.value()[i] - target[i]));
    weight += double(mask[i]);
  }
  const T value = weight > 0 ? static_cast<T>(total / weight) : T(0);
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, value), {pred}, [target, mask, weight](Node<T>& self) {
    if (weight <= 0) return;
    Node<T>* pn = self.parents[0].get();
    Tensor<T>& g = detail::grad_of(pn);
    const T k = self.grad[0] / static_cast<T>(weight);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T d = pn->value[i] - target[i];
      g[i] += k * mask[i] * (d > 0 ? T(1) : d < 0 ? T(-1) : T(0));
    }
  });
}

template <typename T>
Var<T> l1(const Var<T>& pred, const Tensor<T>& target) {
  return masked_l1(pred, target, Tensor<T>(target.shape(), T(1)));
}

template <typename T>
struct TaskLosses {
  Var<T> total;                  // unweighted sum over tasks
  std::vector<Var<T>> per_task;
};

/// Predictions come at decoder resolution and are upsampled (nearest) to the
/// target resolution before the loss.
template <typename T>
TaskLosses<T> task_losses(const std::vector<Var<T>>& predictions, const Batch<T>& batch,
                          const std::vector<TaskSpec>& specs) {
  if (predictions.size() != specs.size()) throw ContractError("task_losses: one prediction per task required");
  TaskLosses<T> out;
  const std::size_t h = batch.images.dim(2);
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const TaskSpec& sp = specs[t];
    require_finite(predictions[t].value(), "prediction for task " + sp.name);
    const Shape ps = predictions[t].shape();
    if (ps[1] != sp.out_channels || h % ps[2] != 0) {
      throw ContractError("task_losses: prediction " + to_string(ps) + " does not fit task " + sp.name);
    }
    Var<T> p = upsample_nearest(predictions[t], h / ps[2]);
    Var<T> loss;
    switch (sp.loss) {
      case LossKind::cross_entropy: loss = cross_entropy(p, batch.seg); break;
      case LossKind::balanced_bce: loss = balanced_bce(p, batch.boundary); break;
      case LossKind::l1:
        loss = sp.out_channels == 2 ? masked_l1(p, batch.normals, batch.normal_mask) : l1(p, batch.depth);
        break;
    }
    out.per_task.push_back(loss);
    out.total = out.total.valid() ? add(out.total, loss) : loss;
  }
  return out;
}

}  // namespace mlore

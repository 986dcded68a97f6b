#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mlore/autodiff.hpp"
#include "mlore/conv_kernels.hpp"

namespace mlore {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

template <typename T>
Tensor<T>& grad_of(Node<T>* n) {
  return n->grad_buffer();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution and linear maps
// ---------------------------------------------------------------------------

/// Stride-1 cross-correlation with padding k/2 plus broadcast bias.
/// `weight` has shape (k, k, C_in, C_out); `bias` has shape (1, C_out, 1, 1).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  detail::require(ws[0] == ws[1] && (ws[0] == 1 || ws[0] == 3),
                  "conv2d: kernel must be 1x1 or 3x3, got " + to_string(ws));
  detail::require(xs[1] == ws[2], "conv2d: input " + to_string(xs) + " does not match kernel " + to_string(ws));
  detail::require(bias.value().size() == ws[3],
                  "conv2d: bias " + to_string(bias.shape()) + " does not match kernel " + to_string(ws));
  Tensor<T> out({xs[0], ws[3], xs[2], xs[3]});
  kernels::conv_forward(x.value().data(), xs[0], xs[1], xs[2], xs[3], weight.value().data(), ws[0], ws[3],
                        bias.value().data(), out.data());
  return make_result<T>(std::move(out), {x, weight, bias}, [xs, ws](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* wn = self.parents[1].get();
    Node<T>* bn = self.parents[2].get();
    T* gx = xn->requires_grad ? detail::grad_of(xn).data() : nullptr;
    T* gw = wn->requires_grad ? detail::grad_of(wn).data() : nullptr;
    T* gb = bn->requires_grad ? detail::grad_of(bn).data() : nullptr;
    kernels::conv_backward(xn->value.data(), xs[0], xs[1], xs[2], xs[3], wn->value.data(), ws[0], ws[3],
                           self.grad.data(), gx, gw, gb);
  });
}

/// Affine map on per-sample vectors stored as (n, in, 1, 1); weight is
/// (1, 1, in, out), bias (1, out, 1, 1).
template <typename T>
Var<T> dense(const Var<T>& v, const Var<T>& weight, const Var<T>& bias) {
  detail::require(v.shape()[2] == 1 && v.shape()[3] == 1, "dense: expected (n, c, 1, 1), got " + to_string(v.shape()));
  detail::require(weight.shape()[0] == 1, "dense: weight must be (1, 1, in, out)");
  return conv2d(v, weight, bias);
}

/// Per-channel mean over all spatial positions: (n, c, h, w) -> (n, c, 1, 1).
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t hw = s[2] * s[3];
  detail::require(hw >= 1, "global_avg_pool: empty spatial extent");
  Tensor<T> out({s[0], s[1], 1, 1});
  const T* xd = x.value().data();
  for (std::size_t i = 0; i < s[0] * s[1]; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += xd[i * hw + p];
    out[i] = acc / static_cast<T>(hw);
  }
  return make_result<T>(std::move(out), {x}, [s, hw](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < s[0] * s[1]; ++i) {
      const T g = self.grad[i] * inv;
      for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
    }
  });
}

/// Linear map along the flattened spatial axis, (C x HW) -> (C x 1) per
/// sample. `weight` has shape (1, 1, H, W) and fixes the spatial size.
template <typename T>
Var<T> spatial_linear(const Var<T>& x, const Var<T>& weight) {
  const Shape s = x.shape();
  const std::size_t hw = s[2] * s[3];
  detail::require(weight.value().size() == hw, "spatial_linear: layer built for " +
                                                   std::to_string(weight.value().size()) +
                                                   " positions, input has " + std::to_string(hw));
  Tensor<T> out({s[0], s[1], 1, 1});
  const T* xd = x.value().data();
  const T* wd = weight.value().data();
  for (std::size_t i = 0; i < s[0] * s[1]; ++i) out[i] = kernels::dot(xd + i * hw, wd, hw);
  return make_result<T>(std::move(out), {x, weight}, [s, hw](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* wn = self.parents[1].get();
    for (std::size_t i = 0; i < s[0] * s[1]; ++i) {
      const T g = self.grad[i];
      if (xn->requires_grad) {
        T* gx = detail::grad_of(xn).data() + i * hw;
        for (std::size_t p = 0; p < hw; ++p) gx[p] += g * wn->value[p];
      }
      if (wn->requires_grad) {
        T* gw = detail::grad_of(wn).data();
        const T* xv = xn->value.data() + i * hw;
        for (std::size_t p = 0; p < hw; ++p) gw[p] += g * xv[p];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Running statistics and hyper-parameters of one BatchNorm layer. The
/// learnable scale/shift live in the owning layer as parameters.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  bool training = false;  // mode of the most recent forward pass

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean({1, channels, 1, 1}, T(0)), running_var({1, channels, 1, 1}, T(1)) {}
};

/// Eval mode: per-channel affine map (x - mu) / sqrt(var + eps) * gamma + beta.
template <typename T>
Var<T> batchnorm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const BatchNormStats<T>& stats) {
  const Shape s = x.shape();
  detail::require(gamma.value().size() == s[1] && beta.value().size() == s[1] &&
                      stats.running_mean.size() == s[1],
                  "batchnorm: channel mismatch for input " + to_string(s));
  detail::require(stats.eps > 0, "batchnorm: eps must be positive");
  const std::size_t hw = s[2] * s[3];
  std::vector<T> inv_std(s[1]);
  for (std::size_t c = 0; c < s[1]; ++c) {
    detail::require(stats.running_var[c] >= 0, "batchnorm: negative running variance");
    inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + stats.eps);
  }
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const T scale = gamma.value()[c] * inv_std[c];
      const T shift = beta.value()[c] - stats.running_mean[c] * scale;
      const T* xp = x.value().data() + (n * s[1] + c) * hw;
      T* yp = out.data() + (n * s[1] + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) yp[p] = xp[p] * scale + shift;
    }
  }
  Tensor<T> mean = stats.running_mean;
  return make_result<T>(std::move(out), {x, gamma, beta}, [s, hw, inv_std, mean](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* gn = self.parents[1].get();
    Node<T>* bn = self.parents[2].get();
    for (std::size_t n = 0; n < s[0]; ++n) {
      for (std::size_t c = 0; c < s[1]; ++c) {
        const std::size_t base = (n * s[1] + c) * hw;
        const T* g = self.grad.data() + base;
        const T* xp = xn->value.data() + base;
        if (xn->requires_grad) {
          T* gx = detail::grad_of(xn).data() + base;
          const T scale = gn->value[c] * inv_std[c];
          for (std::size_t p = 0; p < hw; ++p) gx[p] += g[p] * scale;
        }
        if (gn->requires_grad) {
          T acc = 0;
          for (std::size_t p = 0; p < hw; ++p) acc += g[p] * (xp[p] - mean[c]) * inv_std[c];
          detail::grad_of(gn)[c] += acc;
        }
        if (bn->requires_grad) {
          T acc = 0;
          for (std::size_t p = 0; p < hw; ++p) acc += g[p];
          detail::grad_of(bn)[c] += acc;
        }
      }
    }
  });
}

/// Training mode: normalize with biased batch statistics over (n, h, w) and
/// fold them into the running statistics with the layer momentum.
template <typename T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats) {
  const Shape s = x.shape();
  detail::require(gamma.value().size() == s[1] && beta.value().size() == s[1] &&
                      stats.running_mean.size() == s[1],
                  "batchnorm: channel mismatch for input " + to_string(s));
  detail::require(stats.eps > 0, "batchnorm: eps must be positive");
  const std::size_t hw = s[2] * s[3];
  const std::size_t m = s[0] * hw;
  std::vector<T> inv_std(s[1]);
  Tensor<T> xhat(s);
  Tensor<T> out(s);
  for (std::size_t c = 0; c < s[1]; ++c) {
    T mean = 0;
    for (std::size_t n = 0; n < s[0]; ++n) {
      const T* xp = x.value().data() + (n * s[1] + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) mean += xp[p];
    }
    mean /= static_cast<T>(m);
    T var = 0;
    for (std::size_t n = 0; n < s[0]; ++n) {
      const T* xp = x.value().data() + (n * s[1] + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) var += (xp[p] - mean) * (xp[p] - mean);
    }
    var /= static_cast<T>(m);
    inv_std[c] = T(1) / std::sqrt(var + stats.eps);
    for (std::size_t n = 0; n < s[0]; ++n) {
      const std::size_t base = (n * s[1] + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        xhat[base + p] = (x.value()[base + p] - mean) * inv_std[c];
        out[base + p] = xhat[base + p] * gamma.value()[c] + beta.value()[c];
      }
    }
    const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
    stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * mean;
    stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [s, hw, m, inv_std, xhat](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* gn = self.parents[1].get();
    Node<T>* bn = self.parents[2].get();
    for (std::size_t c = 0; c < s[1]; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t n = 0; n < s[0]; ++n) {
        const std::size_t base = (n * s[1] + c) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          sum_g += self.grad[base + p];
          sum_gx += self.grad[base + p] * xhat[base + p];
        }
      }
      if (gn->requires_grad) detail::grad_of(gn)[c] += sum_gx;
      if (bn->requires_grad) detail::grad_of(bn)[c] += sum_g;
      if (xn->requires_grad) {
        Tensor<T>& gx = detail::grad_of(xn);
        const T k = gn->value[c] * inv_std[c] / static_cast<T>(m);
        for (std::size_t n = 0; n < s[0]; ++n) {
          const std::size_t base = (n * s[1] + c) * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            gx[base + p] += k * (static_cast<T>(m) * self.grad[base + p] - sum_g - xhat[base + p] * sum_gx);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Element-wise maps
// ---------------------------------------------------------------------------

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.value()[i]);
  return make_result<T>(std::move(out), {x}, [df](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Tensor<T>& gx = detail::grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xn->value[i]);
  });
}

/// Exact (erf-based) Gaussian error linear unit.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v > 0 ? v : T(0); }, [](T v) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
T softplus_value(T v) {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
T sigmoid_value(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary(x, [](T v) { return softplus_value(v); }, [](T v) { return sigmoid_value(v); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x, [](T v) { return sigmoid_value(v); },
      [](T v) {
        const T s = sigmoid_value(v);
        return s * (T(1) - s);
      });
}

template <typename T>
Var<T> scale(const Var<T>& x, T alpha) {
  return unary(x, [alpha](T v) { return alpha * v; }, [alpha](T) { return alpha; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary(x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) p->accumulate(self.grad);
  });
}

/// Element-wise product of equally shaped tensors.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>* an = self.parents[0].get();
    Node<T>* bn = self.parents[1].get();
    if (an->requires_grad) {
      Tensor<T>& g = detail::grad_of(an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = detail::grad_of(bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

/// Multiplies every element of sample n by s[n]; s has shape (n, 1, 1, 1).
template <typename T>
Var<T> scale_per_sample(const Var<T>& x, const Var<T>& s) {
  const Shape xs = x.shape();
  detail::require(s.value().size() == xs[0], "scale_per_sample: need one scalar per sample");
  const std::size_t per = xs[1] * xs[2] * xs[3];
  Tensor<T> out(xs);
  for (std::size_t n = 0; n < xs[0]; ++n) {
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = x.value()[n * per + i] * s.value()[n];
  }
  return make_result<T>(std::move(out), {x, s}, [xs, per](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* sn = self.parents[1].get();
    for (std::size_t n = 0; n < xs[0]; ++n) {
      const T* g = self.grad.data() + n * per;
      if (xn->requires_grad) {
        T* gx = detail::grad_of(xn).data() + n * per;
        for (std::size_t i = 0; i < per; ++i) gx[i] += g[i] * sn->value[n];
      }
      if (sn->requires_grad) detail::grad_of(sn)[n] += kernels::dot(g, xn->value.data() + n * per, per);
    }
  });
}

/// Multiplies every channel of x (n, c, h, w) by the single-channel map
/// m (n, 1, h, w).
template <typename T>
Var<T> mul_plane(const Var<T>& x, const Var<T>& m) {
  const Shape xs = x.shape();
  const Shape ms = m.shape();
  detail::require(ms[0] == xs[0] && ms[1] == 1 && ms[2] == xs[2] && ms[3] == xs[3],
                  "mul_plane: mask " + to_string(ms) + " does not fit " + to_string(xs));
  const std::size_t hw = xs[2] * xs[3];
  Tensor<T> out(xs);
  for (std::size_t n = 0; n < xs[0]; ++n) {
    const T* mp = m.value().data() + n * hw;
    for (std::size_t c = 0; c < xs[1]; ++c) {
      const std::size_t base = (n * xs[1] + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) out[base + p] = x.value()[base + p] * mp[p];
    }
  }
  return make_result<T>(std::move(out), {x, m}, [xs, hw](Node<T>& self) {
    Node<T>* xn = self.parents[0].get();
    Node<T>* mn = self.parents[1].get();
    for (std::size_t n = 0; n < xs[0]; ++n) {
      for (std::size_t c = 0; c < xs[1]; ++c) {
        const std::size_t base = (n * xs[1] + c) * hw;
        if (xn->requires_grad) {
          T* gx = detail::grad_of(xn).data() + base;
          for (std::size_t p = 0; p < hw; ++p) gx[p] += self.grad[base + p] * mn->value[n * hw + p];
        }
        if (mn->requires_grad) {
          T* gm = detail::grad_of(mn).data() + n * hw;
          for (std::size_t p = 0; p < hw; ++p) gm[p] += self.grad[base + p] * xn->value[base + p];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
  const Shape xs = x.shape();
  detail::require(begin < end && end <= xs[1], "slice_channels: bad range");
  const std::size_t hw = xs[2] * xs[3];
  const std::size_t c = end - begin;
  Tensor<T> out({xs[0], c, xs[2], xs[3]});
  for (std::size_t n = 0; n < xs[0]; ++n) {
    std::copy_n(x.value().data() + (n * xs[1] + begin) * hw, c * hw, out.data() + n * c * hw);
  }
  return make_result<T>(std::move(out), {x}, [xs, hw, c, begin](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < xs[0]; ++n) {
      T* dst = gx.data() + (n * xs[1] + begin) * hw;
      const T* src = self.grad.data() + n * c * hw;
      for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: no inputs");
  const Shape s0 = xs[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    detail::require(x.shape()[0] == s0[0] && x.shape()[2] == s0[2] && x.shape()[3] == s0[3],
                    "concat_channels: incompatible shapes " + to_string(s0) + " and " + to_string(x.shape()));
    widths.push_back(x.shape()[1]);
    total += x.shape()[1];
  }
  const std::size_t hw = s0[2] * s0[3];
  Tensor<T> out({s0[0], total, s0[2], s0[3]});
  for (std::size_t n = 0; n < s0[0]; ++n) {
    std::size_t at = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::copy_n(xs[i].value().data() + n * widths[i] * hw, widths[i] * hw, out.data() + (n * total + at) * hw);
      at += widths[i];
    }
  }
  return make_result<T>(std::move(out), xs, [s0, hw, total, widths](Node<T>& self) {
    for (std::size_t n = 0; n < s0[0]; ++n) {
      std::size_t at = 0;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        Node<T>* p = self.parents[i].get();
        if (p->requires_grad) {
          T* dst = detail::grad_of(p).data() + n * widths[i] * hw;
          const T* src = self.grad.data() + (n * total + at) * hw;
          for (std::size_t j = 0; j < widths[i] * hw; ++j) dst[j] += src[j];
        }
        at += widths[i];
      }
    }
  });
}

/// Selects the listed batch elements, in order.
template <typename T>
Var<T> gather_batch(const Var<T>& x, const std::vector<std::size_t>& index) {
  const Shape xs = x.shape();
  const std::size_t per = xs[1] * xs[2] * xs[3];
  Tensor<T> out({index.size(), xs[1], xs[2], xs[3]});
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < xs[0], "gather_batch: index out of range");
    std::copy_n(x.value().data() + index[i] * per, per, out.data() + i * per);
  }
  return make_result<T>(std::move(out), {x}, [index, per](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t i = 0; i < index.size(); ++i) {
      for (std::size_t j = 0; j < per; ++j) gx[index[i] * per + j] += self.grad[i * per + j];
    }
  });
}

/// Inverse of gather_batch: places y's elements at `index` in a zero batch of
/// size `batch`.
template <typename T>
Var<T> scatter_batch(const Var<T>& y, const std::vector<std::size_t>& index, std::size_t batch) {
  const Shape ys = y.shape();
  detail::require(ys[0] == index.size(), "scatter_batch: index length mismatch");
  const std::size_t per = ys[1] * ys[2] * ys[3];
  Tensor<T> out({batch, ys[1], ys[2], ys[3]});
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < batch, "scatter_batch: index out of range");
    std::copy_n(y.value().data() + i * per, per, out.data() + index[i] * per);
  }
  return make_result<T>(std::move(out), {y}, [index, per](Node<T>& self) {
    Tensor<T>& gy = detail::grad_of(self.parents[0].get());
    for (std::size_t i = 0; i < index.size(); ++i) {
      for (std::size_t j = 0; j < per; ++j) gy[i * per + j] += self.grad[index[i] * per + j];
    }
  });
}

template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_batch: no inputs");
  const Shape s0 = xs[0].shape();
  const std::size_t per = s0[1] * s0[2] * s0[3];
  std::size_t total = 0;
  for (const auto& x : xs) {
    detail::require(x.shape()[1] == s0[1] && x.shape()[2] == s0[2] && x.shape()[3] == s0[3],
                    "concat_batch: incompatible shapes");
    total += x.shape()[0];
  }
  Tensor<T> out({total, s0[1], s0[2], s0[3]});
  std::size_t at = 0;
  for (const auto& x : xs) {
    std::copy_n(x.value().data(), x.value().size(), out.data() + at * per);
    at += x.shape()[0];
  }
  return make_result<T>(std::move(out), xs, [per](Node<T>& self) {
    std::size_t at = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.shape()[0];
      if (p->requires_grad) {
        T* dst = detail::grad_of(p.get()).data();
        for (std::size_t j = 0; j < n * per; ++j) dst[j] += self.grad[at * per + j];
      }
      at += n;
    }
  });
}

/// Rearranges non-overlapping f x f patches into channels:
/// (n, c, h, w) -> (n, c*f*f, h/f, w/f). Followed by a 1x1 conv this is a
/// stride-f patch embedding.
template <typename T>
Var<T> space_to_depth(const Var<T>& x, std::size_t f) {
  const Shape xs = x.shape();
  detail::require(f >= 1 && xs[2] % f == 0 && xs[3] % f == 0 && xs[2] >= f && xs[3] >= f,
                  "space_to_depth: spatial size " + to_string(xs) + " not divisible by " + std::to_string(f));
  const std::size_t oh = xs[2] / f, ow = xs[3] / f, oc = xs[1] * f * f;
  Tensor<T> out({xs[0], oc, oh, ow});
  auto src_index = [xs, f, oh, ow, oc](std::size_t n, std::size_t co, std::size_t y, std::size_t x0) {
    const std::size_t c = co / (f * f), dy = (co / f) % f, dx = co % f;
    (void)oh;
    (void)ow;
    (void)oc;
    return ((n * xs[1] + c) * xs[2] + y * f + dy) * xs[3] + x0 * f + dx;
  };
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t co = 0; co < oc; ++co)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x0 = 0; x0 < ow; ++x0) out.at(n, co, y, x0) = x.value()[src_index(n, co, y, x0)];
  return make_result<T>(std::move(out), {x}, [xs, oh, ow, oc, src_index](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t co = 0; co < oc; ++co)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x0 = 0; x0 < ow; ++x0) gx[src_index(n, co, y, x0)] += self.grad.at(n, co, y, x0);
  });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t f) {
  if (f == 1) return x;
  const Shape xs = x.shape();
  Tensor<T> out({xs[0], xs[1], xs[2] * f, xs[3] * f});
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t c = 0; c < xs[1]; ++c)
      for (std::size_t y = 0; y < xs[2] * f; ++y)
        for (std::size_t x0 = 0; x0 < xs[3] * f; ++x0) out.at(n, c, y, x0) = x.value().at(n, c, y / f, x0 / f);
  return make_result<T>(std::move(out), {x}, [xs, f](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t c = 0; c < xs[1]; ++c)
        for (std::size_t y = 0; y < xs[2] * f; ++y)
          for (std::size_t x0 = 0; x0 < xs[3] * f; ++x0) gx.at(n, c, y / f, x0 / f) += self.grad.at(n, c, y, x0);
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Softmax across channels at every (n, h, w); max-subtracted.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const Shape xs = x.shape();
  detail::require(xs[1] >= 1, "softmax: empty vector");
  const std::size_t hw = xs[2] * xs[3];
  Tensor<T> out(xs);
  for (std::size_t n = 0; n < xs[0]; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < xs[1]; ++c) mx = std::max(mx, x.value()[(n * xs[1] + c) * hw + p]);
      T z = 0;
      for (std::size_t c = 0; c < xs[1]; ++c) {
        const T e = std::exp(x.value()[(n * xs[1] + c) * hw + p] - mx);
        out[(n * xs[1] + c) * hw + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < xs[1]; ++c) out[(n * xs[1] + c) * hw + p] /= z;
    }
  }
  Tensor<T> y = out;
  return make_result<T>(std::move(out), {x}, [xs, hw, y](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < xs[0]; ++n) {
      for (std::size_t p = 0; p < hw; ++p) {
        T dotp = 0;
        for (std::size_t c = 0; c < xs[1]; ++c) {
          const std::size_t i = (n * xs[1] + c) * hw + p;
          dotp += self.grad[i] * y[i];
        }
        for (std::size_t c = 0; c < xs[1]; ++c) {
          const std::size_t i = (n * xs[1] + c) * hw + p;
          gx[i] += y[i] * (self.grad[i] - dotp);
        }
      }
    }
  });
}

/// Indices of the k largest entries; ties go to the lower index.
template <typename T>
std::vector<std::size_t> top_k_indices(const T* v, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [v](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Noisy-top-k gate normalization: per sample of logits (n, N, 1, 1), all but
/// the k largest are masked to -inf before the softmax. `active` receives the
/// selected index set of every sample (ascending).
template <typename T>
Var<T> topk_softmax(const Var<T>& logits, std::size_t k, std::vector<std::vector<std::size_t>>* active = nullptr) {
  const Shape s = logits.shape();
  detail::require(s[2] == 1 && s[3] == 1, "topk_softmax: expected (n, N, 1, 1)");
  detail::require(k >= 1 && k <= s[1], "topk_softmax: k=" + std::to_string(k) + " outside [1, " +
                                           std::to_string(s[1]) + "]");
  const std::size_t nexp = s[1];
  Tensor<T> out(s);
  std::vector<std::vector<std::size_t>> sets(s[0]);
  for (std::size_t n = 0; n < s[0]; ++n) {
    const T* v = logits.value().data() + n * nexp;
    for (std::size_t e = 0; e < nexp; ++e) {
      if (!std::isfinite(v[e])) throw ContractError("topk_softmax: non-finite logit");
    }
    sets[n] = top_k_indices(v, nexp, k);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t e : sets[n]) mx = std::max(mx, v[e]);
    T z = 0;
    for (std::size_t e : sets[n]) {
      out[n * nexp + e] = std::exp(v[e] - mx);
      z += out[n * nexp + e];
    }
    for (std::size_t e : sets[n]) out[n * nexp + e] /= z;
  }
  if (active) *active = sets;
  Tensor<T> y = out;
  return make_result<T>(std::move(out), {logits}, [nexp, sets, y](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < sets.size(); ++n) {
      T dotp = 0;
      for (std::size_t e : sets[n]) dotp += self.grad[n * nexp + e] * y[n * nexp + e];
      for (std::size_t e : sets[n]) gx[n * nexp + e] += y[n * nexp + e] * (self.grad[n * nexp + e] - dotp);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, acc), {x}, [](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.value().size()));
}

/// Sum over the batch axis: (n, c, h, w) -> (1, c, h, w).
template <typename T>
Var<T> sum_batch(const Var<T>& x) {
  const Shape xs = x.shape();
  const std::size_t per = xs[1] * xs[2] * xs[3];
  Tensor<T> out({1, xs[1], xs[2], xs[3]});
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t i = 0; i < per; ++i) out[i] += x.value()[n * per + i];
  return make_result<T>(std::move(out), {x}, [xs, per](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t i = 0; i < per; ++i) gx[n * per + i] += self.grad[i];
  });
}

/// <x, w> for a constant weight tensor of the same shape.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  x.value().require_same_shape(w, "weighted_sum");
  T acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += x.value()[i] * w[i];
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, acc), {x}, [w](Node<T>& self) {
    Tensor<T>& gx = detail::grad_of(self.parents[0].get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[0] * w[i];
  });
}

/// Squared coefficient of variation, population variance over mean squared.
/// A vector with zero mean yields 0.
template <typename T>
Var<T> cv_squared(const Var<T>& v) {
  const std::size_t n = v.value().size();
  detail::require(n >= 1, "cv_squared: empty vector");
  T mean = 0;
  for (T x : v.value().values()) mean += x;
  mean /= static_cast<T>(n);
  if (mean == T(0)) {
    return make_result<T>(Tensor<T>({1, 1, 1, 1}, T(0)), {v}, [](Node<T>&) {});
  }
  T var = 0;
  for (T x : v.value().values()) var += (x - mean) * (x - mean);
  var /= static_cast<T>(n);
  const T value = var / (mean * mean);
  return make_result<T>(Tensor<T>({1, 1, 1, 1}, value), {v}, [n, mean, var](Node<T>& self) {
    Node<T>* vn = self.parents[0].get();
    Tensor<T>& gv = detail::grad_of(vn);
    // d var/dx_i = 2 (x_i - mean) / n ; d mean/dx_i = 1 / n
    const T m2 = mean * mean;
    for (std::size_t i = 0; i < n; ++i) {
      const T dvar = T(2) * (vn->value[i] - mean) / static_cast<T>(n);
      const T dmean = T(1) / static_cast<T>(n);
      gv[i] += self.grad[0] * (dvar / m2 - T(2) * var / (m2 * mean) * dmean);
    }
  });
}

}  // namespace mlore

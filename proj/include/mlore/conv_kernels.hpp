#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace mlore::kernels {

/// Dot product with eight independent accumulators (fixed summation order).
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  T s = 0;
  for (; i < n; ++i) s += a[i] * b[i];
  for (std::size_t l = 0; l < 8; ++l) s += acc[l];
  return s;
}

// Direct stride-1 "same" cross-correlation on NCHW planes with kernels laid
// out as (kh, kw, C_in, C_out).
//
// Each input plane is copied into a zero-padded plane of row pitch
// wp = w + 2r. Output is computed on a "wide" grid of h rows with the same
// pitch, so every tap (dy, dx) becomes one flat offset dy * wp + dx and a
// block of consecutive wide outputs reads one contiguous input run per tap.
// The 2r extra columns per wide row are discarded.

struct Geometry {
  std::size_t h, w, k, r, wp, plane, wide;

  static constexpr std::size_t kSlack = 64;

  Geometry(std::size_t h_, std::size_t w_, std::size_t k_) : h(h_), w(w_), k(k_), r(k_ / 2), wp(w_ + 2 * (k_ / 2)) {
    wide = h * wp;
    plane = (h + 2 * r) * wp + 2 * r + kSlack;
  }
  std::size_t wide_padded(std::size_t block) const { return (wide + block - 1) / block * block; }
  std::vector<std::size_t> offsets() const {
    std::vector<std::size_t> o;
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) o.push_back(ky * wp + kx);
    return o;
  }
};

template <typename T>
void pad_planes(const T* x, std::size_t channels, const Geometry& g, std::vector<T>& out) {
  out.assign(channels * g.plane, T(0));
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < g.h; ++y)
      std::copy(x + (c * g.h + y) * g.w, x + (c * g.h + y + 1) * g.w, out.data() + c * g.plane + (y + g.r) * g.wp + g.r);
}

/// Output pixels per register block: two 64-byte vectors.
template <typename T>
constexpr std::size_t pixel_block() {
  return 128 / sizeof(T);
}

template <typename T, std::size_t CB>
void forward_block(const T* xpad, std::size_t plane, std::size_t cin, const std::size_t* offs, std::size_t ntaps,
                   const T* weight, std::size_t cout, std::size_t co0, std::size_t p0, T* ywide, std::size_t pitch) {
  constexpr std::size_t PB = pixel_block<T>();
  T acc[CB][PB] = {};
  for (std::size_t t = 0; t < ntaps; ++t) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* __restrict s = xpad + ci * plane + p0 + offs[t];
      const T* __restrict wr = weight + (t * cin + ci) * cout + co0;
      for (std::size_t c = 0; c < CB; ++c) {
        const T a = wr[c];
        for (std::size_t l = 0; l < PB; ++l) acc[c][l] += a * s[l];
      }
    }
  }
  for (std::size_t c = 0; c < CB; ++c) std::copy(acc[c], acc[c] + PB, ywide + (co0 + c) * pitch + p0);
}

template <typename T>
void conv_forward(const T* x, std::size_t batch, std::size_t cin, std::size_t h, std::size_t w, const T* weight,
                  std::size_t k, std::size_t cout, const T* bias, T* y) {
  constexpr std::size_t PB = pixel_block<T>();
  const Geometry g(h, w, k);
  const auto offs = g.offsets();
  const std::size_t pitch = g.wide_padded(PB);
  std::vector<T> xpad, ywide(cout * pitch);
  for (std::size_t n = 0; n < batch; ++n) {
    pad_planes(x + n * cin * h * w, cin, g, xpad);
    for (std::size_t p0 = 0; p0 < pitch; p0 += PB) {
      std::size_t co = 0;
      for (; co + 8 <= cout; co += 8)
        forward_block<T, 8>(xpad.data(), g.plane, cin, offs.data(), offs.size(), weight, cout, co, p0, ywide.data(), pitch);
      for (; co + 4 <= cout; co += 4)
        forward_block<T, 4>(xpad.data(), g.plane, cin, offs.data(), offs.size(), weight, cout, co, p0, ywide.data(), pitch);
      for (; co < cout; ++co)
        forward_block<T, 1>(xpad.data(), g.plane, cin, offs.data(), offs.size(), weight, cout, co, p0, ywide.data(), pitch);
    }
    T* yout = y + n * cout * h * w;
    for (std::size_t co = 0; co < cout; ++co) {
      const T b = bias ? bias[co] : T(0);
      for (std::size_t yy = 0; yy < h; ++yy) {
        const T* src = ywide.data() + co * pitch + yy * g.wp;
        T* dst = yout + (co * h + yy) * w;
        for (std::size_t xx = 0; xx < w; ++xx) dst[xx] = src[xx] + b;
      }
    }
  }
}

/// Kernel of the adjoint convolution: spatially flipped, C_in and C_out swapped.
template <typename T>
std::vector<T> adjoint_kernel(const T* weight, std::size_t k, std::size_t cin, std::size_t cout) {
  std::vector<T> out(k * k * cin * cout);
  for (std::size_t ky = 0; ky < k; ++ky)
    for (std::size_t kx = 0; kx < k; ++kx)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t co = 0; co < cout; ++co)
          out[(((k - 1 - ky) * k + (k - 1 - kx)) * cout + co) * cin + ci] = weight[((ky * k + kx) * cin + ci) * cout + co];
  return out;
}

// gw[t][ci][co0..co0+CB) += sum_p xpad[ci][p + off_t] * gwide[co][p], for CI
// input channels at once.
template <typename T, std::size_t CI, std::size_t CB>
void weight_grad_block(const T* xpad, std::size_t plane, std::size_t off, std::size_t ci0, const T* gwide,
                       std::size_t pitch, std::size_t co0, T* gw_tap, std::size_t cout) {
  constexpr std::size_t L = 64 / sizeof(T);
  T acc[CI][CB][L] = {};
  for (std::size_t p0 = 0; p0 < pitch; p0 += L) {
    for (std::size_t i = 0; i < CI; ++i) {
      const T* __restrict xs = xpad + (ci0 + i) * plane + off + p0;
      for (std::size_t c = 0; c < CB; ++c) {
        const T* __restrict gs = gwide + (co0 + c) * pitch + p0;
        for (std::size_t l = 0; l < L; ++l) acc[i][c][l] += xs[l] * gs[l];
      }
    }
  }
  for (std::size_t i = 0; i < CI; ++i)
    for (std::size_t c = 0; c < CB; ++c) {
      T s = 0;
      for (std::size_t l = 0; l < L; ++l) s += acc[i][c][l];
      gw_tap[(ci0 + i) * cout + co0 + c] += s;
    }
}

/// Accumulates gradients of conv_forward. Any of gx / gw / gb may be null.
template <typename T>
void conv_backward(const T* x, std::size_t batch, std::size_t cin, std::size_t h, std::size_t w, const T* weight,
                   std::size_t k, std::size_t cout, const T* gy, T* gx, T* gw, T* gb) {
  const std::size_t hw = h * w;
  if (gb) {
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t co = 0; co < cout; ++co) {
        T s = 0;
        for (std::size_t p = 0; p < hw; ++p) s += gy[(n * cout + co) * hw + p];
        gb[co] += s;
      }
  }
  if (gx) {
    const std::vector<T> adj = adjoint_kernel(weight, k, cin, cout);
    std::vector<T> tmp(batch * cin * hw);
    conv_forward(gy, batch, cout, h, w, adj.data(), k, cin, static_cast<const T*>(nullptr), tmp.data());
    for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
  }
  if (gw) {
    constexpr std::size_t L = 64 / sizeof(T);
    const Geometry g(h, w, k);
    const auto offs = g.offsets();
    const std::size_t pitch = g.wide_padded(L);
    std::vector<T> xpad, gwide(cout * pitch);
    for (std::size_t n = 0; n < batch; ++n) {
      pad_planes(x + n * cin * hw, cin, g, xpad);
      std::fill(gwide.begin(), gwide.end(), T(0));
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t yy = 0; yy < h; ++yy)
          std::copy(gy + ((n * cout + co) * h + yy) * w, gy + ((n * cout + co) * h + yy + 1) * w,
                    gwide.data() + co * pitch + yy * g.wp);
      for (std::size_t t = 0; t < offs.size(); ++t) {
        T* gw_tap = gw + t * cin * cout;
        std::size_t ci = 0;
        for (; ci + 4 <= cin; ci += 4) {
          std::size_t co = 0;
          for (; co + 4 <= cout; co += 4)
            weight_grad_block<T, 4, 4>(xpad.data(), g.plane, offs[t], ci, gwide.data(), pitch, co, gw_tap, cout);
          for (; co < cout; ++co)
            weight_grad_block<T, 4, 1>(xpad.data(), g.plane, offs[t], ci, gwide.data(), pitch, co, gw_tap, cout);
        }
        for (; ci < cin; ++ci)
          for (std::size_t co = 0; co < cout; ++co)
            weight_grad_block<T, 1, 1>(xpad.data(), g.plane, offs[t], ci, gwide.data(), pitch, co, gw_tap, cout);
      }
    }
  }
}

}  // namespace mlore::kernels

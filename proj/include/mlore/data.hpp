#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mlore/io.hpp"
#include "mlore/random.hpp"
#include "mlore/tasks.hpp"
#include "mlore/tensor.hpp"

namespace mlore {

/// One synthetic scene and its four dense targets, all row-major (c, y, x).
struct ToySample {
  std::vector<float> image;               // (3, H, W) in [0, 1]
  std::vector<unsigned char> seg;         // (H, W) class ids, 0 = background
  std::vector<unsigned char> boundary;    // (H, W) 0/1
  std::vector<float> distance;            // (H, W) signed, > 0 inside shapes
  std::vector<float> normals;             // (2, H, W) unit or zero
};

struct Dataset {
  std::uint64_t seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<ToySample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Pixels whose label differs from one of their 4-neighbours.
inline std::vector<unsigned char> label_edges(const std::vector<unsigned char>& seg, std::size_t h, std::size_t w) {
  std::vector<unsigned char> e(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const unsigned char v = seg[y * w + x];
      const bool edge = (y > 0 && seg[(y - 1) * w + x] != v) || (y + 1 < h && seg[(y + 1) * w + x] != v) ||
                        (x > 0 && seg[y * w + x - 1] != v) || (x + 1 < w && seg[y * w + x + 1] != v);
      e[y * w + x] = edge ? 1 : 0;
    }
  return e;
}

/// Signed Euclidean distance from each pixel centre to the nearest pixel of
/// the opposite set (foreground vs background), minus half a pixel, divided
/// by min(H, W). Positive on foreground. The nearest opposite pixel always
/// borders the pixel's own set, so only those are scanned.
inline std::vector<float> signed_distance(const std::vector<unsigned char>& seg, std::size_t h, std::size_t w) {
  std::vector<unsigned char> fg(h * w);
  for (std::size_t i = 0; i < h * w; ++i) fg[i] = seg[i] != 0;
  const std::vector<unsigned char> edge = label_edges(fg, h, w);
  std::vector<std::array<int, 2>> fg_edge, bg_edge;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (edge[y * w + x]) (fg[y * w + x] ? fg_edge : bg_edge).push_back({int(y), int(x)});
  const double norm = double(std::min(h, w));
  std::vector<float> d(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool inside = fg[y * w + x];
      const auto& other = inside ? bg_edge : fg_edge;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : other) {
        const double dy = double(q[0]) - double(y), dx = double(q[1]) - double(x);
        best = std::min(best, dy * dy + dx * dx);
      }
      const double dist = other.empty() ? norm : std::sqrt(best) - 0.5;
      d[y * w + x] = static_cast<float>((inside ? dist : -dist) / norm);
    }
  return d;
}

/// Central-difference gradient (one-sided at the border), normalized where
/// its magnitude exceeds 1e-6 and zero elsewhere. Returns (2, H, W): d/dx, d/dy.
inline std::vector<float> gradient_normals(const std::vector<float>& f, std::size_t h, std::size_t w) {
  std::vector<float> n(2 * h * w, 0.f);
  auto at = [&](std::size_t y, std::size_t x) { return double(f[y * w + x]); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x0 = x > 0 ? x - 1 : x, x1 = x + 1 < w ? x + 1 : x;
      const std::size_t y0 = y > 0 ? y - 1 : y, y1 = y + 1 < h ? y + 1 : y;
      const double gx = x1 > x0 ? (at(y, x1) - at(y, x0)) / double(x1 - x0) : 0.0;
      const double gy = y1 > y0 ? (at(y1, x) - at(y0, x)) / double(y1 - y0) : 0.0;
      const double m = std::sqrt(gx * gx + gy * gy);
      if (m > 1e-6) {
        n[y * w + x] = static_cast<float>(gx / m);
        n[h * w + y * w + x] = static_cast<float>(gy / m);
      }
    }
  return n;
}

namespace detail {

// Fill colours per class (index 0 unused).
inline constexpr std::array<std::array<double, 3>, kNumClasses> kClassColor{
    {{0, 0, 0}, {0.85, 0.25, 0.20}, {0.20, 0.75, 0.30}, {0.25, 0.35, 0.90}}};

inline bool in_triangle(double px, double py, const std::array<std::array<double, 2>, 3>& v) {
  auto side = [&](int a, int b) {
    return (v[b][0] - v[a][0]) * (py - v[a][1]) - (v[b][1] - v[a][1]) * (px - v[a][0]);
  };
  const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
  return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
}

}  // namespace detail

/// 1-4 rectangles (class 1), circles (2) or triangles (3) over a grey
/// background, painted in order so later shapes occlude earlier ones.
inline ToySample gen_sample(Rng& rng, std::size_t h, std::size_t w) {
  const std::size_t hw = h * w;
  ToySample s;
  s.seg.assign(hw, 0);
  std::vector<std::array<double, 3>> color(hw);
  const double bg = rng.uniform(0.1, 0.3);
  std::fill(color.begin(), color.end(), std::array<double, 3>{bg, bg, bg});

  const double m = double(std::min(h, w));
  const int shapes = int(rng.integer(1, 4));
  std::array<std::size_t, 2> first_centre{};
  unsigned char first_class = 0;
  for (int i = 0; i < shapes; ++i) {
    const auto cls = static_cast<unsigned char>(rng.integer(1, 3));
    const double cx = rng.uniform(0, double(w)), cy = rng.uniform(0, double(h));
    const double size = rng.uniform(m / 10, m / 4);
    std::array<double, 3> fill = detail::kClassColor[cls];
    for (auto& c : fill) c = std::clamp(c + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    const double aspect = rng.uniform(0.6, 1.0);
    const double theta = rng.uniform(0, 2 * 3.14159265358979323846);
    std::array<std::array<double, 2>, 3> tri{};
    for (int k = 0; k < 3; ++k) {
      const double a = theta + k * 2 * 3.14159265358979323846 / 3;
      tri[k] = {cx + 1.3 * size * std::cos(a), cy + 1.3 * size * std::sin(a)};
    }
    if (i == 0) {
      first_centre = {std::min(h - 1, std::size_t(cy)), std::min(w - 1, std::size_t(cx))};
      first_class = cls;
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double px = double(x) + 0.5, py = double(y) + 0.5;
        bool in = false;
        if (cls == 1) in = std::abs(px - cx) <= size && std::abs(py - cy) <= size * aspect;
        if (cls == 2) in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= size * size;
        if (cls == 3) in = detail::in_triangle(px, py, tri);
        if (in) {
          s.seg[y * w + x] = cls;
          color[y * w + x] = fill;
        }
      }
  }
  if (std::all_of(s.seg.begin(), s.seg.end(), [](unsigned char v) { return v == 0; })) {
    const std::size_t i = first_centre[0] * w + first_centre[1];
    s.seg[i] = first_class;
    color[i] = detail::kClassColor[first_class];
  }

  s.image.resize(3 * hw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      s.image[c * hw + i] = static_cast<float>(std::clamp(color[i][c] + 0.03 * rng.normal(), 0.0, 1.0));
  s.boundary = label_edges(s.seg, h, w);
  s.distance = signed_distance(s.seg, h, w);
  s.normals = gradient_normals(s.distance, h, w);
  return s;
}

/// Sample i is drawn from its own sub-stream, so any prefix of a larger
/// dataset equals the smaller dataset.
inline Dataset gen_dataset(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w) {
  if (count < 1) throw ContractError("gen_dataset: count must be >= 1");
  if (h < 16 || w < 16) throw ContractError("gen_dataset: height and width must be >= 16");
  Dataset d{seed, h, w, {}};
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "data", i));
    d.samples.push_back(gen_sample(rng, h, w));
  }
  return d;
}

inline constexpr const char* kDatasetMagic = "MLOREDS1";

inline void save_dataset(const Dataset& d, const std::string& path) {
  const std::size_t n = d.size(), h = d.height, w = d.width, hw = h * w;
  std::vector<float> image, distance, normals;
  std::vector<unsigned char> seg, boundary;
  image.reserve(n * 3 * hw);
  for (const auto& s : d.samples) {
    image.insert(image.end(), s.image.begin(), s.image.end());
    seg.insert(seg.end(), s.seg.begin(), s.seg.end());
    boundary.insert(boundary.end(), s.boundary.begin(), s.boundary.end());
    distance.insert(distance.end(), s.distance.begin(), s.distance.end());
    normals.insert(normals.end(), s.normals.begin(), s.normals.end());
  }
  Container c;
  c.meta = {{"format", "mlore-toy-dataset"}, {"version", 1}, {"seed", d.seed}, {"count", n}, {"height", h}, {"width", w}};
  c.planes.push_back(make_float_plane("image", {n, 3, h, w}, image));
  c.planes.push_back(make_byte_plane("seg", {n, h, w}, std::move(seg)));
  c.planes.push_back(make_byte_plane("boundary", {n, h, w}, std::move(boundary)));
  c.planes.push_back(make_float_plane("distance", {n, h, w}, distance));
  c.planes.push_back(make_float_plane("normals", {n, 2, h, w}, normals));
  write_container(path, kDatasetMagic, c);
}

inline Dataset load_dataset(const std::string& path) {
  const Container c = read_container(path, kDatasetMagic);
  Dataset d;
  std::size_t n = 0;
  try {
    d.seed = c.meta.at("seed").get<std::uint64_t>();
    n = c.meta.at("count").get<std::size_t>();
    d.height = c.meta.at("height").get<std::size_t>();
    d.width = c.meta.at("width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad dataset manifest: " + e.what());
  }
  const std::size_t hw = d.height * d.width;
  const auto image = float_values(c.plane("image"));
  const auto distance = float_values(c.plane("distance"));
  const auto normals = float_values(c.plane("normals"));
  const auto& seg = c.plane("seg").bytes;
  const auto& boundary = c.plane("boundary").bytes;
  if (image.size() != n * 3 * hw || distance.size() != n * hw || normals.size() != n * 2 * hw || seg.size() != n * hw ||
      boundary.size() != n * hw) {
    throw IoError(path + ": plane sizes disagree with the manifest");
  }
  for (std::size_t i = 0; i < n; ++i) {
    ToySample s;
    s.image.assign(image.begin() + i * 3 * hw, image.begin() + (i + 1) * 3 * hw);
    s.seg.assign(seg.begin() + i * hw, seg.begin() + (i + 1) * hw);
    s.boundary.assign(boundary.begin() + i * hw, boundary.begin() + (i + 1) * hw);
    s.distance.assign(distance.begin() + i * hw, distance.begin() + (i + 1) * hw);
    s.normals.assign(normals.begin() + i * 2 * hw, normals.begin() + (i + 1) * 2 * hw);
    d.samples.push_back(std::move(s));
  }
  return d;
}

/// Network inputs and targets for a list of sample indices.
template <typename T>
struct Batch {
  Tensor<T> images;                  // (n, 3, H, W)
  std::vector<unsigned char> seg;    // (n, H, W)
  Tensor<T> boundary;                // (n, 1, H, W)
  Tensor<T> depth;                   // (n, 1, H, W)
  Tensor<T> normals;                 // (n, 2, H, W)
  Tensor<T> normal_mask;             // (n, 2, H, W), 1 where the target normal is defined

  std::size_t size() const { return images.dim(0); }
};

template <typename T>
Batch<T> make_batch(const Dataset& d, const std::vector<std::size_t>& index) {
  const std::size_t n = index.size(), h = d.height, w = d.width, hw = h * w;
  Batch<T> b;
  b.images = Tensor<T>({n, 3, h, w});
  b.boundary = Tensor<T>({n, 1, h, w});
  b.depth = Tensor<T>({n, 1, h, w});
  b.normals = Tensor<T>({n, 2, h, w});
  b.normal_mask = Tensor<T>({n, 2, h, w});
  b.seg.resize(n * hw);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= d.size()) throw ContractError("make_batch: sample index out of range");
    const ToySample& s = d.samples[index[i]];
    for (std::size_t j = 0; j < 3 * hw; ++j) b.images[i * 3 * hw + j] = static_cast<T>(s.image[j]);
    for (std::size_t p = 0; p < hw; ++p) {
      b.seg[i * hw + p] = s.seg[p];
      b.boundary[i * hw + p] = static_cast<T>(s.boundary[p]);
      b.depth[i * hw + p] = static_cast<T>(s.distance[p]);
      const bool valid = s.normals[p] != 0.f || s.normals[hw + p] != 0.f;
      for (std::size_t c = 0; c < 2; ++c) {
        b.normals[(i * 2 + c) * hw + p] = static_cast<T>(s.normals[c * hw + p]);
        b.normal_mask[(i * 2 + c) * hw + p] = valid ? T(1) : T(0);
      }
    }
  }
  return b;
}

}  // namespace mlore

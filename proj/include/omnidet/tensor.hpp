#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace omnidet {

// Dense row-major tensor of doubles. Small and CPU-only; every shape in this
// project fits comfortably in memory, so clarity wins over cleverness.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(count(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<std::size_t>(count(shape)) != v.size())
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static long long count(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor scalar(double x) { return Tensor({1}, {x}); }
  static Tensor full(std::vector<int> s, double x) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  // 3-D indexing (channels, rows, cols), the layout used throughout.
  double& at3(int c, int y, int x) {
    return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at3(int c, int y, int x) const {
    return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double& at2(int y, int x) { return v[static_cast<std::size_t>(y) * shape[1] + x]; }
  double at2(int y, int x) const { return v[static_cast<std::size_t>(y) * shape[1] + x]; }

  double sum() const { return std::accumulate(v.begin(), v.end(), 0.0); }
  double max() const {
    double m = -1e300;
    for (double x : v) m = std::max(m, x);
    return m;
  }
  double norm() const {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }
};

// Bilinear resize of a 2-D map, half-pixel centers. Returns the input untouched
// when the shape already matches so identity cases stay exact.
inline Tensor bilinear_resize2d(const Tensor& in, int out_h, int out_w) {
  assert(in.shape.size() == 2);
  int h = in.shape[0], w = in.shape[1];
  if (h == out_h && w == out_w) return in;
  Tensor out({out_h, out_w});
  double sy = static_cast<double>(h) / out_h;
  double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
      out.at2(y, x) = (1 - wy) * ((1 - wx) * in.at2(y0c, x0c) + wx * in.at2(y0c, x1c)) +
                      wy * ((1 - wx) * in.at2(y1c, x0c) + wx * in.at2(y1c, x1c));
    }
  }
  return out;
}

}  // namespace omnidet

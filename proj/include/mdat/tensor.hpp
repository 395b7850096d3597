#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdat {

// Dense row-major tensor of doubles. Shape is a list of positive extents;
// rank 0 is represented as shape {} with one element (a scalar).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(count(shape), 0.0);
  }

  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape))
      throw std::invalid_argument("Tensor: data length does not match shape");
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int e : s) {
      if (e <= 0) throw std::invalid_argument("Tensor: nonpositive extent");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  std::size_t numel() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D accessors (valid when shape has rank 2)
  double& at2(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  double at2(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// sign with sign(0) = 0
inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void clip01_inplace(Tensor& t) {
  for (double& v : t.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double linf_distance(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace mdat

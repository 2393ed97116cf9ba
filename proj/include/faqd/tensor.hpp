#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "faqd/common.hpp"
#include "faqd/rng.hpp"

namespace faqd {

// Dense row-major float32 array with an optional gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty, or same numel as data

  Tensor() = default;
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
  }

  static Tensor zeros(Shape s) {
    std::int64_t n = numel(s);
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.0f));
  }
  static Tensor full(Shape s, float v) {
    std::int64_t n = numel(s);
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), v));
  }
  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  static Tensor randn(Shape s, Rng& rng, float stddev = 1.0f, float mean = 0.0f) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = mean + stddev * rng.normal_f();
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

  bool has_nan() const {
    for (float v : data)
      if (std::isnan(v)) return true;
    return false;
  }
  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw ShapeError("max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace faqd

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "leco/errors.hpp"
#include "leco/rng.hpp"

namespace leco {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles. The buffer is shared between views
// (reshape is free); all ops allocate fresh outputs, so buffers are never
// mutated after creation except through explicit in-place helpers used on
// uniquely-owned tensors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}

  Tensor(Shape shape, double fill)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  static Tensor from(std::vector<double> values, Shape shape) {
    assert(static_cast<int64_t>(values.size()) == shape_numel(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : *t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }

  const double* data() const { return data_->data(); }
  double* data() { return data_->data(); }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }

  double item() const {
    assert(numel() == 1);
    return (*data_)[0];
  }

  // 2-D convenience; tensors with more dims are treated as [rows, rest].
  int64_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int64_t cols() const { return shape_.empty() ? 0 : numel() / std::max<int64_t>(shape_[0], 1); }
  double at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  double& at(int64_t r, int64_t c) { return (*data_)[static_cast<size_t>(r * cols() + c)]; }

  // Shares the buffer.
  Tensor reshape(Shape shape) const {
    assert(shape_numel(shape) == numel());
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  bool all_finite() const {
    for (double x : *data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double x : *data_) s += x * x;
    return std::sqrt(s);
  }

  double sum() const { return std::accumulate(data_->begin(), data_->end(), 0.0); }

  double max_abs_diff(const Tensor& o) const {
    assert(numel() == o.numel());
    double m = 0.0;
    for (int64_t i = 0; i < numel(); ++i) m = std::max(m, std::abs((*this)[i] - o[i]));
    return m;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace leco

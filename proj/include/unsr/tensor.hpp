#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "unsr/common.hpp"

namespace unsr {

// Dense row-major array of 64-bit floats. Rank is 1 or 2 in practice; a
// rank-1 tensor of length n behaves as a 1-by-n row where a matrix is needed.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      const long d = shape_[i];
      const bool zero_rows_ok = shape_.size() == 2 && i == 0;  // entity lists may be empty
      if (d < 0 || (d == 0 && !zero_rows_ok))
        throw DimError("Tensor: bad dimension in shape " + shape_str(shape_));
    }
    v_.assign(numel_of(shape_), 0.0);
  }

  Tensor(long rows, long cols) : Tensor(std::vector<long>{rows, cols}) {}

  static Tensor zeros(long rows, long cols) { return Tensor(rows, cols); }

  static Tensor row(std::initializer_list<double> xs) {
    Tensor t(1, static_cast<long>(xs.size()));
    long j = 0;
    for (double x : xs) t.v_[j++] = x;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    long r = static_cast<long>(rows.size());
    long c = static_cast<long>(rows.begin()->size());
    Tensor t(r, c);
    long i = 0;
    for (const auto& row : rows) {
      if (static_cast<long>(row.size()) != c) throw DimError("Tensor: ragged row list");
      for (double x : row) t.v_[i++] = x;
    }
    return t;
  }

  static Tensor identity(long n) {
    Tensor t(n, n);
    for (long i = 0; i < n; ++i) t.v_[i * n + i] = 1.0;
    return t;
  }

  const std::vector<long>& shape() const { return shape_; }
  long rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
  long cols() const {
    if (shape_.empty()) return 0;
    return shape_.size() == 2 ? shape_[1] : shape_[0];
  }
  std::size_t numel() const { return v_.size(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  double& operator()(long r, long c) { return v_[static_cast<std::size_t>(r) * cols() + c]; }
  double operator()(long r, long c) const { return v_[static_cast<std::size_t>(r) * cols() + c]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  void fill(double x) { v_.assign(v_.size(), x); }

  bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  static std::size_t numel_of(const std::vector<long>& shape) {
    std::size_t n = 1;
    for (long d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? 0 : n;
  }

  static std::string shape_str(const std::vector<long>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape_); }

 private:
  std::vector<long> shape_;
  std::vector<double> v_;
};

}  // namespace unsr

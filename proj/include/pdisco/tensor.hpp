#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pdisco/errors.hpp"

namespace pdisco {

// Dense row-major tensor of doubles. Rank 1..4 is all this project needs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims, double fill = 0.0) : dims_(std::move(dims)) {
    std::size_t n = 1;
    for (int d : dims_) {
      if (d < 0) throw ConfigError("tensor dimension must be non-negative");
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, fill);
  }

  static Tensor from_values(std::vector<int> dims, std::vector<double> values) {
    Tensor t(std::move(dims));
    if (values.size() != t.data_.size())
      throw ConfigError("tensor value count does not match shape");
    t.data_ = std::move(values);
    return t;
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }

  bool empty() const { return data_.empty(); }
  int numel() const { return static_cast<int>(data_.size()); }
  int rank() const { return static_cast<int>(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<std::size_t>(i)]; }

  // rank-2 access: (rows, cols)
  double& at2(int i, int j) { return data_[static_cast<std::size_t>(i) * dims_[1] + j]; }
  double at2(int i, int j) const { return data_[static_cast<std::size_t>(i) * dims_[1] + j]; }

  // rank-3 access: (channels, rows, cols)
  double& at3(int c, int i, int j) {
    return data_[(static_cast<std::size_t>(c) * dims_[1] + i) * dims_[2] + j];
  }
  double at3(int c, int i, int j) const {
    return data_[(static_cast<std::size_t>(c) * dims_[1] + i) * dims_[2] + j];
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  double max_abs_diff(const Tensor& other) const {
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i)
      m = std::max(m, std::fabs(data_[i] - other.data_[i]));
    return m;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << ")";
    return os.str();
  }

  const std::vector<double>& storage() const { return data_; }
  std::vector<double>& storage() { return data_; }

 private:
  std::vector<int> dims_;
  std::vector<double> data_;
};

inline void require_shape(const Tensor& t, std::initializer_list<int> dims, const char* what) {
  if (t.rank() != static_cast<int>(dims.size()))
    throw ConfigError(std::string(what) + ": expected rank " + std::to_string(dims.size()) +
                      ", got " + t.shape_string());
  int i = 0;
  for (int d : dims) {
    if (d >= 0 && t.dim(i) != d)
      throw ConfigError(std::string(what) + ": expected dim " + std::to_string(i) + " = " +
                        std::to_string(d) + ", got " + t.shape_string());
    ++i;
  }
}

}  // namespace pdisco

#pragma once

// Central finite-difference oracle for gradient tests. Differentiates the
// plain forward evaluation numerically; implementations under test provide
// their analytic gradients via tape backward.

#include <cmath>
#include <cstddef>
#include <vector>

#include "pdisco/rng.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco::testing {

// f: double(const std::vector<Tensor>&). Central differences w.r.t. inputs[which].
template <typename F>
Tensor fd_gradient(const F& f, std::vector<Tensor> inputs, std::size_t which,
                   double step = 1e-6) {
  Tensor grad(inputs[which].dims());
  for (int i = 0; i < grad.numel(); ++i) {
    const double saved = inputs[which][i];
    inputs[which][i] = saved + step;
    const double up = f(inputs);
    inputs[which][i] = saved - step;
    const double down = f(inputs);
    inputs[which][i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

inline Tensor random_tensor(std::vector<int> dims, RandomSource& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(dims));
  for (int i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace pdisco::testing

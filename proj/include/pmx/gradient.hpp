#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "pmx/dual.hpp"

namespace pmx {

struct GradResult {
  double value = 0.0;
  std::vector<double> grad;
  bool value_finite = false;
  bool grad_finite = false;
};

// Evaluates f and its gradient in ceil(n/8) forward sweeps. f must accept
// std::span<const Dual8>. Non-finite value and non-finite gradient components
// are reported separately so callers can tell a rejected point from a
// broken derivative.
template <typename F>
GradResult gradient(F&& f, std::span<const double> x) {
  const std::size_t n = x.size();
  GradResult res;
  res.grad.assign(n, 0.0);

  std::vector<Dual8> xd(n);
  for (std::size_t i = 0; i < n; ++i) xd[i] = Dual8(x[i]);

  res.grad_finite = true;
  for (std::size_t block = 0; block * kDualWidth < n || (block == 0 && n == 0); ++block) {
    const std::size_t lo = block * kDualWidth;
    const std::size_t width = std::min(kDualWidth, n - lo);
    for (std::size_t k = 0; k < width; ++k) xd[lo + k].der[k] = 1.0;
    Dual8 y = f(std::span<const Dual8>(xd));
    for (std::size_t k = 0; k < width; ++k) {
      res.grad[lo + k] = y.der[k];
      if (!std::isfinite(y.der[k])) res.grad_finite = false;
      xd[lo + k].der[k] = 0.0;
    }
    if (block == 0) {
      res.value = y.val;
      res.value_finite = std::isfinite(y.val);
    }
    if (!res.value_finite) break;
  }
  if (!res.value_finite) res.grad_finite = false;
  return res;
}

}  // namespace pmx

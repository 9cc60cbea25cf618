#pragma once

#include <cmath>

#include "pmx/dual.hpp"

namespace pmx {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))
inline constexpr double kLog2 = 0.69314718055994530942;

// Log-density kernels, generic over the differentiation scalar. All include
// their normalizing constants so log_joint values are comparable across
// parameterizations.

template <typename TY, typename TM, typename TS>
auto normal_lpdf(const TY& y, const TM& mu, const TS& sigma) {
  using std::log;
  auto z = (y - mu) / sigma;
  return -0.5 * z * z - log(sigma) - kLogSqrt2Pi;
}

template <typename TY, typename TM, typename TS>
auto lognormal_lpdf(const TY& y, const TM& mu, const TS& sigma) {
  using std::log;
  return normal_lpdf(log(y), mu, sigma) - log(y);
}

// Normal(0, sigma) truncated to y >= 0; the log 2 keeps the density normalized.
template <typename TY, typename TS>
auto half_normal_lpdf(const TY& y, const TS& sigma) {
  return kLog2 + normal_lpdf(y, 0.0, sigma);
}

}  // namespace pmx

#pragma once

// Adaptive Dormand-Prince 4(5) with the classical step controller. The error
// norm and all accept/reject decisions read only value parts, so an autodiff
// run takes the exact step sequence of the plain double run and derivatives
// never perturb step selection.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/dual.hpp"

namespace pmx {

struct OdeControls {
  double rtol = 1e-6;
  double atol = 1e-6;
  int max_num_step = 100000;
};

namespace detail {

// rhs(t, y, dydt); integrates y in place from t0 to t1.
template <typename T, typename F>
void rk45_core(F&& rhs, std::vector<T>& y, double t0, double t1, const OdeControls& c) {
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;

  if (!(t1 > t0)) return;
  const std::size_t n = y.size();
  std::vector<T> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), ynew(n), err(n);

  auto scaled_rms = [&](const std::vector<T>& v, const std::vector<T>& ya,
                        const std::vector<T>& yb) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double sc =
          c.atol + c.rtol * std::max(std::fabs(value_of(ya[i])), std::fabs(value_of(yb[i])));
      const double q = value_of(v[i]) / sc;
      acc += q * q;
    }
    return std::sqrt(acc / static_cast<double>(n));
  };

  rhs(t0, y, k1);

  // Classical starting-step heuristic from the rhs magnitude.
  double h;
  {
    double d0 = 0.0, d1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double sc = c.atol + c.rtol * std::fabs(value_of(y[i]));
      const double q0 = value_of(y[i]) / sc;
      const double q1 = value_of(k1[i]) / sc;
      d0 += q0 * q0;
      d1 += q1 * q1;
    }
    d0 = std::sqrt(d0 / static_cast<double>(n));
    d1 = std::sqrt(d1 / static_cast<double>(n));
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, t1 - t0);
    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h0 * k1[i];
    rhs(t0 + h0, ytmp, k2);
    for (std::size_t i = 0; i < n; ++i) err[i] = k2[i] - k1[i];
    const double d2 = scaled_rms(err, y, y) / h0;
    double h1;
    if (std::max(d1, d2) <= 1e-15) {
      h1 = std::max(1e-6, h0 * 1e-3);
    } else {
      h1 = std::pow(0.01 / std::max(d1, d2), 0.2);
    }
    h = std::min({100.0 * h0, h1, t1 - t0});
  }

  double t = t0;
  int n_steps = 0;
  bool last_rejected = false;
  while (t < t1) {
    if (++n_steps > c.max_num_step) {
      throw NumericalError("ode solver exceeded max_num_step=" + std::to_string(c.max_num_step) +
                           " at t=" + std::to_string(t));
    }
    h = std::min(h, t1 - t);
    if (h <= std::fabs(t) * 1e-15 || h < 1e-300) {
      throw NumericalError("ode solver step size underflow at t=" + std::to_string(t));
    }

    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * (a21 * k1[i]);
    rhs(t + c2 * h, ytmp, k2);
    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    rhs(t + c3 * h, ytmp, k3);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    rhs(t + c4 * h, ytmp, k4);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    rhs(t + c5 * h, ytmp, k5);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    rhs(t + h, ytmp, k6);
    for (std::size_t i = 0; i < n; ++i)
      ynew[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    rhs(t + h, ynew, k7);

    for (std::size_t i = 0; i < n; ++i)
      err[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
    const double err_norm = scaled_rms(err, y, ynew);

    if (err_norm <= 1.0) {
      t += h;
      y.swap(ynew);
      k1.swap(k7);  // first-same-as-last
      double factor = (err_norm == 0.0) ? 5.0 : 0.9 * std::pow(err_norm, -0.2);
      factor = std::clamp(factor, 0.2, 5.0);
      if (last_rejected) factor = std::min(factor, 1.0);
      h *= factor;
      last_rejected = false;
    } else {
      double factor = std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 1.0);
      h *= factor;
      last_rejected = true;
    }
  }
}

}  // namespace detail

template <typename T, typename F>
void rk45_integrate(F&& rhs, std::vector<T>& y, double t0, double t1, const OdeControls& c) {
  detail::rk45_core<T>(rhs, y, t0, t1, c);
}

}  // namespace pmx

#include <doctest.h>

#include <cmath>
#include <vector>

#include "pmx/dual.hpp"
#include "pmx/gradient.hpp"

using pmx::Dual8;

namespace {

// Central-difference oracle for a scalar function of one variable.
template <typename F>
double fd_derivative(F&& f, double x) {
  const double h = 1e-5 * std::max(1.0, std::fabs(x));
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace

TEST_SUITE("dual") {

TEST_CASE("composite derivatives match finite differences") {
  auto f = [](auto x) {
    using std::exp;
    using std::log;
    using std::pow;
    using std::sqrt;
    return exp(-0.5 * x) * log(x) + pow(x, 1.7) / sqrt(x + 2.0) - 3.0 / x;
  };
  for (double x : {0.3, 1.0, 2.7, 11.0}) {
    Dual8 xd(x, 0);
    Dual8 y = f(xd);
    CHECK(y.val == doctest::Approx(f(x)).epsilon(1e-14));
    CHECK(y.der[0] == doctest::Approx(fd_derivative(f, x)).epsilon(1e-7));
  }
}

TEST_CASE("expm1 and log1p stay accurate near zero") {
  Dual8 x(1e-12, 0);
  CHECK(pmx::expm1(x).val == doctest::Approx(1e-12).epsilon(1e-10));
  CHECK(pmx::expm1(x).der[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pmx::log1p(x).der[0] == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("fmin and fmax ties take the first argument's derivative") {
  Dual8 a(2.0, 0);
  Dual8 b(2.0, 1);
  Dual8 mx = pmx::fmax(a, b);
  CHECK(mx.der[0] == 1.0);
  CHECK(mx.der[1] == 0.0);
  Dual8 mn = pmx::fmin(a, b);
  CHECK(mn.der[0] == 1.0);
  CHECK(mn.der[1] == 0.0);
  CHECK(pmx::fmax(a, Dual8(3.0, 2)).der[2] == 1.0);
  CHECK(pmx::fmin(a, Dual8(1.0, 2)).der[2] == 1.0);
}

TEST_CASE("gradient batches directions beyond one block") {
  const std::size_t n = 20;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 0.1 * static_cast<double>(i + 1);
  auto f = [](std::span<const Dual8> z) {
    Dual8 acc(0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      acc += static_cast<double>(i + 1) * z[i] * z[i];
    }
    acc += z[0] * z[19];
    return acc;
  };
  auto g = pmx::gradient(f, x);
  REQUIRE(g.value_finite);
  REQUIRE(g.grad_finite);
  for (std::size_t i = 0; i < n; ++i) {
    double expect = 2.0 * static_cast<double>(i + 1) * x[i];
    if (i == 0) expect += x[19];
    if (i == 19) expect += x[0];
    CHECK(g.grad[i] == doctest::Approx(expect).epsilon(1e-13));
  }
}

TEST_CASE("non-finite value and non-finite gradient are reported separately") {
  std::vector<double> x{0.0};
  auto sqrt_at_zero = [](std::span<const Dual8> z) { return pmx::sqrt(z[0]); };
  auto g1 = pmx::gradient(sqrt_at_zero, x);
  CHECK(g1.value_finite);
  CHECK_FALSE(g1.grad_finite);

  auto log_at_zero = [](std::span<const Dual8> z) { return pmx::log(z[0]); };
  auto g2 = pmx::gradient(log_at_zero, x);
  CHECK_FALSE(g2.value_finite);
  CHECK_FALSE(g2.grad_finite);
}

}  // TEST_SUITE

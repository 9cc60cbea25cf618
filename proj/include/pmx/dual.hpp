#pragma once

// Forward-mode scalar carrying a fixed block of 8 partial derivatives.
// Gradients of an n-dimensional function are assembled in ceil(n/8) sweeps;
// unused lanes stay zero. Branch decisions (comparisons, fmin/fmax ties,
// step-size control) look only at the value part so a dual-typed evaluation
// follows the exact code path of the plain double evaluation.

#include <array>
#include <cmath>
#include <cstddef>

namespace pmx {

inline constexpr std::size_t kDualWidth = 8;

struct Dual8 {
  double val = 0.0;
  std::array<double, kDualWidth> der{};

  Dual8() = default;
  Dual8(double v) : val(v) {}  // NOLINT: implicit promotion from constants is intended
  Dual8(double v, std::size_t direction) : val(v) { der[direction] = 1.0; }

  Dual8& operator+=(const Dual8& o) {
    val += o.val;
    for (std::size_t i = 0; i < kDualWidth; ++i) der[i] += o.der[i];
    return *this;
  }
  Dual8& operator-=(const Dual8& o) {
    val -= o.val;
    for (std::size_t i = 0; i < kDualWidth; ++i) der[i] -= o.der[i];
    return *this;
  }
  Dual8& operator*=(const Dual8& o) {
    for (std::size_t i = 0; i < kDualWidth; ++i) der[i] = der[i] * o.val + val * o.der[i];
    val *= o.val;
    return *this;
  }
  Dual8& operator/=(const Dual8& o) {
    // value uses true division so T=Dual8 value parts match T=double bitwise
    const double q = val / o.val;
    const double inv = 1.0 / o.val;
    for (std::size_t i = 0; i < kDualWidth; ++i) der[i] = (der[i] - q * o.der[i]) * inv;
    val = q;
    return *this;
  }
};

inline double value_of(const Dual8& x) { return x.val; }

inline Dual8 operator+(Dual8 a, const Dual8& b) { return a += b; }
inline Dual8 operator-(Dual8 a, const Dual8& b) { return a -= b; }
inline Dual8 operator*(Dual8 a, const Dual8& b) { return a *= b; }
inline Dual8 operator/(Dual8 a, const Dual8& b) { return a /= b; }

inline Dual8 operator+(Dual8 a) { return a; }
inline Dual8 operator-(Dual8 a) {
  a.val = -a.val;
  for (auto& d : a.der) d = -d;
  return a;
}

inline Dual8 operator+(Dual8 a, double b) { a.val += b; return a; }
inline Dual8 operator+(double a, Dual8 b) { b.val += a; return b; }
inline Dual8 operator-(Dual8 a, double b) { a.val -= b; return a; }
inline Dual8 operator-(double a, Dual8 b) {
  b.val = a - b.val;
  for (auto& d : b.der) d = -d;
  return b;
}
inline Dual8 operator*(Dual8 a, double b) {
  a.val *= b;
  for (auto& d : a.der) d *= b;
  return a;
}
inline Dual8 operator*(double a, Dual8 b) { return b * a; }
inline Dual8 operator/(Dual8 a, double b) {
  const double inv = 1.0 / b;
  a.val /= b;
  for (auto& d : a.der) d *= inv;
  return a;
}
inline Dual8 operator/(double a, const Dual8& b) {
  Dual8 r;
  const double inv = 1.0 / b.val;
  r.val = a / b.val;
  for (std::size_t i = 0; i < kDualWidth; ++i) r.der[i] = -r.val * inv * b.der[i];
  return r;
}

inline bool operator<(const Dual8& a, const Dual8& b) { return a.val < b.val; }
inline bool operator>(const Dual8& a, const Dual8& b) { return a.val > b.val; }
inline bool operator<=(const Dual8& a, const Dual8& b) { return a.val <= b.val; }
inline bool operator>=(const Dual8& a, const Dual8& b) { return a.val >= b.val; }
inline bool operator==(const Dual8& a, const Dual8& b) { return a.val == b.val; }
inline bool operator!=(const Dual8& a, const Dual8& b) { return a.val != b.val; }
inline bool operator<(const Dual8& a, double b) { return a.val < b; }
inline bool operator<(double a, const Dual8& b) { return a < b.val; }
inline bool operator>(const Dual8& a, double b) { return a.val > b; }
inline bool operator>(double a, const Dual8& b) { return a > b.val; }
inline bool operator<=(const Dual8& a, double b) { return a.val <= b; }
inline bool operator>=(const Dual8& a, double b) { return a.val >= b; }
inline bool operator==(const Dual8& a, double b) { return a.val == b; }

// Chain rule helper: g(f(x)) with g'(f) known.
inline Dual8 apply_unary(const Dual8& x, double fval, double dfdx) {
  Dual8 r;
  r.val = fval;
  for (std::size_t i = 0; i < kDualWidth; ++i) r.der[i] = dfdx * x.der[i];
  return r;
}

using std::exp;
using std::expm1;
using std::fabs;
using std::fmax;
using std::fmin;
using std::log;
using std::log1p;
using std::pow;
using std::sqrt;

inline Dual8 exp(const Dual8& x) {
  const double e = std::exp(x.val);
  return apply_unary(x, e, e);
}
inline Dual8 expm1(const Dual8& x) {
  const double e = std::expm1(x.val);
  return apply_unary(x, e, e + 1.0);
}
inline Dual8 log(const Dual8& x) { return apply_unary(x, std::log(x.val), 1.0 / x.val); }
inline Dual8 log1p(const Dual8& x) { return apply_unary(x, std::log1p(x.val), 1.0 / (1.0 + x.val)); }
inline Dual8 sqrt(const Dual8& x) {
  const double s = std::sqrt(x.val);
  return apply_unary(x, s, 0.5 / s);
}
inline Dual8 sin(const Dual8& x) { return apply_unary(x, std::sin(x.val), std::cos(x.val)); }
inline Dual8 cos(const Dual8& x) { return apply_unary(x, std::cos(x.val), -std::sin(x.val)); }
inline Dual8 fabs(const Dual8& x) { return x.val < 0.0 ? -x : x; }

inline Dual8 pow(const Dual8& x, double p) {
  return apply_unary(x, std::pow(x.val, p), p * std::pow(x.val, p - 1.0));
}
inline Dual8 pow(double b, const Dual8& x) {
  const double f = std::pow(b, x.val);
  return apply_unary(x, f, f * std::log(b));
}
inline Dual8 pow(const Dual8& b, const Dual8& e) {
  // value uses std::pow so T=Dual8 value parts match T=double bitwise
  const double f = std::pow(b.val, e.val);
  const double db = e.val * f / b.val;
  const double de = f * std::log(b.val);
  Dual8 r;
  r.val = f;
  for (std::size_t i = 0; i < kDualWidth; ++i) r.der[i] = db * b.der[i] + de * e.der[i];
  return r;
}

// Ties propagate the first argument's derivative.
inline Dual8 fmax(const Dual8& a, const Dual8& b) { return b.val > a.val ? b : a; }
inline Dual8 fmin(const Dual8& a, const Dual8& b) { return b.val < a.val ? b : a; }
inline Dual8 fmax(double a, const Dual8& b) { return fmax(Dual8(a), b); }
inline Dual8 fmax(const Dual8& a, double b) { return fmax(a, Dual8(b)); }
inline Dual8 fmin(double a, const Dual8& b) { return fmin(Dual8(a), b); }
inline Dual8 fmin(const Dual8& a, double b) { return fmin(a, Dual8(b)); }

inline bool isfinite(const Dual8& x) {
  if (!std::isfinite(x.val)) return false;
  for (double d : x.der)
    if (!std::isfinite(d)) return false;
  return true;
}

}  // namespace pmx

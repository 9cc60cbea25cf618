#pragma once

// Closed-form one- and two-compartment kinetics with first-order absorption.
// States are amounts: (gut, central) and (gut, central, peripheral).
// Everything is generic over the scalar so derivatives flow through.
//
// Two-compartment micro rates: k10 = CL/VC, k12 = Q/VC, k21 = Q/VP.
// The central/peripheral block has eigenvalues -lambda1, -lambda2 with
//   lambda1 + lambda2 = k10 + k12 + k21,  lambda1 * lambda2 = k10 * k21,
// ordered lambda1 >= lambda2 >= 0.

#include <array>
#include <cmath>

#include "pmx/common.hpp"
#include "pmx/dual.hpp"

namespace pmx {

template <typename T>
struct OneCptParams {
  T cl, v, ka;
};

template <typename T>
struct TwoCptParams {
  T cl, q, vc, vp, ka;
  T k10() const { return cl / vc; }
  T k12() const { return q / vc; }
  T k21() const { return q / vp; }
};

// (1 - exp(-x t)) / x, continuous through x = 0. The series branch keeps the
// value and its derivatives finite and accurate when x*t is tiny, which also
// covers the confluent absorption case (ka close to an eigenvalue) and the
// lambda2 = 0 cases (CL = 0 or Q = 0) without perturbing any parameter.
template <typename T>
T pexp(const T& x, double t) {
  const T xt = x * t;
  if (std::fabs(value_of(xt)) < 1e-4) {
    return t * (1.0 - xt * (0.5 - xt * ((1.0 / 6.0) - xt * (1.0 / 24.0))));
  }
  return -expm1(-xt) / x;
}

// (exp(-a t) - exp(-b t)) / (b - a); symmetric in (a, b).
template <typename T>
T exp_ratio(const T& a, const T& b, double t) {
  if (value_of(a) <= value_of(b)) return exp(-a * t) * pexp(b - a, t);
  return exp(-b * t) * pexp(a - b, t);
}

// Slow eigenvalue is recovered by Vieta so it is exactly zero when CL or Q
// vanishes instead of a cancellation residue.
template <typename T>
T lambda1_twocpt(const T& cl, const T& q, const T& vc, const T& vp) {
  const T k10 = cl / vc, k12 = q / vc, k21 = q / vp;
  const T s = k10 + k12 + k21;
  T disc = s * s - 4.0 * k10 * k21;
  if (value_of(disc) < 0.0) disc = T(0.0);
  return 0.5 * (s + sqrt(disc));
}

// Absorption-rate lower bound that keeps ka on the fast side of the
// flip-flop ambiguity.
inline double ka_lower_bound(double cl, double q, double vc, double vp) {
  return lambda1_twocpt(cl, q, vc, vp);
}

// Allometric normalization (weight/70)^exponent.
inline double allometric_scale(double weight, double exponent) {
  return std::pow(weight / 70.0, exponent);
}

// Advances amounts over dt under constant per-compartment infusion rates.
template <typename T>
std::array<T, 3> twocpt_advance(const std::array<T, 3>& u, double dt, const TwoCptParams<T>& p,
                                const std::array<T, 3>& rate) {
  if (dt == 0.0) return u;
  const T ka = p.ka;
  const T e_ka = exp(-ka * dt);
  const T pk_ka = pexp(ka, dt);

  std::array<T, 3> out;
  out[0] = u[0] * e_ka + rate[0] * pk_ka;

  const T k10 = p.k10(), k12 = p.k12(), k21 = p.k21();
  const T s = k10 + k12 + k21;
  if (value_of(s) <= 0.0) {
    // CL = Q = 0: central and peripheral just integrate their inflows.
    const T absorbed = u[0] * (1.0 - e_ka) + rate[0] * (dt - pk_ka);
    out[1] = u[1] + absorbed + rate[1] * dt;
    out[2] = u[2] + rate[2] * dt;
    return out;
  }

  T disc = s * s - 4.0 * k10 * k21;
  if (value_of(disc) < 0.0) disc = T(0.0);
  const T lam1 = 0.5 * (s + sqrt(disc));
  const T lam2 = (k10 * k21) / lam1;
  const T denom = lam1 - lam2;

  const T a = k10 + k12;
  const T b = k12;
  const T c = k21;

  // Forcing into the 2x2 block: g e^{-ka t} + h.
  const T g0 = ka * u[0] - rate[0];
  const T h0 = rate[0] + rate[1];
  const T h1 = rate[2];

  const T e1 = exp(-lam1 * dt), e2 = exp(-lam2 * dt);
  const T i1_1 = exp_ratio(ka, lam1, dt), i1_2 = exp_ratio(ka, lam2, dt);
  const T i2_1 = pexp(lam1, dt), i2_2 = pexp(lam2, dt);

  const T w1c = u[1] * e1 + g0 * i1_1 + h0 * i2_1;
  const T w1p = u[2] * e1 + h1 * i2_1;
  const T w2c = u[1] * e2 + g0 * i1_2 + h0 * i2_2;
  const T w2p = u[2] * e2 + h1 * i2_2;

  // Spectral projectors P1 = (B + lam2 I)/(lam2 - lam1), P2 = (B + lam1 I)/(lam1 - lam2).
  out[1] = ((a - lam2) * w1c - c * w1p + (lam1 - a) * w2c + c * w2p) / denom;
  out[2] = (-b * w1c + (c - lam2) * w1p + b * w2c + (lam1 - c) * w2p) / denom;
  return out;
}

template <typename T>
std::array<T, 2> onecpt_advance(const std::array<T, 2>& u, double dt, const OneCptParams<T>& p,
                                const std::array<T, 2>& rate) {
  if (dt == 0.0) return u;
  const T ka = p.ka;
  const T k10 = p.cl / p.v;
  std::array<T, 2> out;
  out[0] = u[0] * exp(-ka * dt) + rate[0] * pexp(ka, dt);
  out[1] = u[1] * exp(-k10 * dt) + (ka * u[0] - rate[0]) * exp_ratio(ka, k10, dt) +
           (rate[0] + rate[1]) * pexp(k10, dt);
  return out;
}

}  // namespace pmx

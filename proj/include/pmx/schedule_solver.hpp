#pragma once

// Event-schedule engine shared by the analytic and numeric solvers. Walks one
// subject's expanded records in time order, carrying the state across dose
// applications, lagged doses, infusion starts/ends and steady-state resets,
// and records the post-event amounts at every record.
//
// Conventions:
//  - the state starts at zero at the subject's first record time;
//  - reported amounts at a dose row are post-dose;
//  - bioavailability scales the amount; for infusions the rate is kept and
//    the duration becomes F*amt/rate;
//  - tlag shifts the application time, splitting the advance interval;
//  - ss=1 resets the subject to the periodic steady state of that dose.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/events.hpp"
#include "pmx/ivp.hpp"
#include "pmx/lin_pk.hpp"

namespace pmx {

struct DoseControls {
  std::vector<double> f;     // bioavailability per compartment, default 1
  std::vector<double> tlag;  // lag per compartment, default 0

  static DoseControls defaults(std::size_t n_cmt) {
    DoseControls dc;
    dc.f.assign(n_cmt, 1.0);
    dc.tlag.assign(n_cmt, 0.0);
    return dc;
  }
};

namespace detail {

inline void check_dose_controls(const DoseControls& dc, std::size_t n_cmt) {
  if (dc.f.size() != n_cmt || dc.tlag.size() != n_cmt) {
    throw ValidationError("dose controls must provide F and tlag for all " +
                          std::to_string(n_cmt) + " compartments");
  }
  for (std::size_t i = 0; i < n_cmt; ++i) {
    if (dc.f[i] < 0.0 || dc.tlag[i] < 0.0) {
      throw ValidationError("F and tlag must be non-negative");
    }
  }
}

// Periodic steady state by repeated cycling; used by the numeric advancers.
// The map takes a post-dose state through one full inter-dose interval.
template <typename T, typename CycleFn>
std::vector<T> cycle_steady_state(std::vector<T> y, CycleFn&& cycle) {
  constexpr int kMaxCycles = 1000;
  constexpr double kRelTol = 1e-8;
  for (int it = 0; it < kMaxCycles; ++it) {
    std::vector<T> prev = y;
    cycle(y);
    double max_delta = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      max_delta = std::max(max_delta, std::fabs(value_of(y[i]) - value_of(prev[i])));
      scale = std::max(scale, std::fabs(value_of(y[i])));
    }
    if (max_delta <= kRelTol * std::max(scale, 1e-300)) return y;
  }
  throw NumericalError("steady state cycle iteration did not converge in 1000 cycles");
}

// Closed-form periodic steady state for a linear advancer: solve
// (I - Phi(ii)) u+ = dose response, with Phi built column-by-column.
template <typename T, typename AdvFn>
std::vector<T> linear_steady_state(std::size_t n, AdvFn&& advance, int cmt0, double famt,
                                   double rate, double ii) {
  std::vector<std::vector<T>> phi(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<T> e(n, T(0.0));
    e[j] = T(1.0);
    advance(e, ii, -1);
    phi[j] = std::move(e);
  }

  std::vector<T> rhs(n, T(0.0));
  if (rate <= 0.0) {
    rhs[cmt0] = T(famt);
  } else {
    const double tinf = famt / rate;
    std::vector<T> z(n, T(0.0));
    advance(z, tinf, cmt0);       // infusion response from rest
    advance(z, ii - tinf, -1);    // carry to the end of the cycle
    rhs = std::move(z);
  }

  // M = I - Phi, dense column-major assembly.
  std::vector<std::vector<T>> m(n, std::vector<T>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = (i == j ? T(1.0) : T(0.0)) - phi[j][i];

  std::vector<T> rhs0 = rhs;
  double scale = 0.0;
  for (const auto& row : m)
    for (const auto& v : row) scale = std::max(scale, std::fabs(value_of(v)));

  // Gaussian elimination with partial pivoting on value parts. A vanishing
  // pivot with a vanishing right-hand side marks a compartment with no
  // elimination path (e.g. Q = 0 peripheral); its periodic state is zero.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::vector<bool> zeroed(n, false);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = -1.0;
    for (std::size_t r = col; r < n; ++r) {
      const double a = std::fabs(value_of(m[perm[r]][col]));
      if (a > best) {
        best = a;
        piv = r;
      }
    }
    std::swap(perm[col], perm[piv]);
    const std::size_t pr = perm[col];
    if (best <= 1e-12 * std::max(scale, 1e-300)) {
      zeroed[col] = true;
      continue;
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const std::size_t rr = perm[r];
      const T fac = m[rr][col] / m[pr][col];
      if (value_of(fac) == 0.0) continue;
      for (std::size_t cc = col; cc < n; ++cc) m[rr][cc] -= fac * m[pr][cc];
      rhs[rr] -= fac * rhs[pr];
    }
  }
  std::vector<T> u(n, T(0.0));
  for (std::size_t col = n; col-- > 0;) {
    if (zeroed[col]) {
      u[col] = T(0.0);
      continue;
    }
    T acc = rhs[perm[col]];
    for (std::size_t cc = col + 1; cc < n; ++cc) acc -= m[perm[col]][cc] * u[cc];
    u[col] = acc / m[perm[col]][col];
  }

  // Residual check against the unfactored system; catches true
  // non-existence (no elimination, e.g. CL = 0 with a recurring dose).
  double unorm = 0.0, rnorm = 0.0;
  for (std::size_t i = 0; i < n; ++i) unorm = std::max(unorm, std::fabs(value_of(u[i])));
  for (std::size_t i = 0; i < n; ++i) {
    T acc = -rhs0[i];
    for (std::size_t j = 0; j < n; ++j) {
      acc += ((i == j ? T(1.0) : T(0.0)) - phi[j][i]) * u[j];
    }
    rnorm = std::max(rnorm, std::fabs(value_of(acc)));
  }
  double bnorm = 0.0;
  for (std::size_t i = 0; i < n; ++i) bnorm = std::max(bnorm, std::fabs(value_of(rhs0[i])));
  if (rnorm > 1e-8 * std::max({unorm, bnorm, 1e-300})) {
    throw NumericalError("steady state does not exist for this dose (no elimination path)");
  }
  return u;
}

}  // namespace detail

// Advancer interface consumed by solve_schedule:
//   std::size_t n_states() const;
//   void advance(std::vector<T>& y, double dt, std::span<const double> rates) const;
//   std::vector<T> steady_state(int cmt0, double famt, double rate, double ii) const;

template <typename T, typename Advancer>
Matrix<T> solve_schedule(std::span<const EventRecord> records, const DoseControls& dc,
                         const Advancer& adv) {
  const std::size_t n = adv.n_states();
  detail::check_dose_controls(dc, n);
  Matrix<T> out(n, records.size());
  if (records.empty()) return out;

  struct Pending {
    double time;
    std::size_t seq;
    bool is_infusion;
    int cmt0;
    double value;     // bolus amount or infusion rate
    double duration;  // infusion only
    std::size_t origin_row;
  };
  struct Active {
    int cmt0;
    double rate;
    double t_end;
  };

  std::vector<T> y(n, T(0.0));
  std::vector<Pending> pending;  // kept sorted by (time, seq)
  std::vector<Active> active;
  std::vector<double> rates(n, 0.0);
  std::size_t seq_counter = 0;
  double t = records.front().time;

  auto rebuild_rates = [&] {
    std::fill(rates.begin(), rates.end(), 0.0);
    for (const auto& a : active) rates[a.cmt0] += a.rate;
  };
  auto start_infusion = [&](int cmt0, double rate, double duration, std::size_t origin_row) {
    for (const auto& a : active) {
      if (a.cmt0 == cmt0) {
        throw ValidationError("row " + std::to_string(origin_row) +
                              ": overlapping infusions into compartment " +
                              std::to_string(cmt0 + 1));
      }
    }
    active.push_back({cmt0, rate, t + duration});
    rebuild_rates();
  };
  auto push_pending = [&](Pending p) {
    p.seq = seq_counter++;
    auto it = std::upper_bound(pending.begin(), pending.end(), p, [](const Pending& a,
                                                                     const Pending& b) {
      return a.time != b.time ? a.time < b.time : a.seq < b.seq;
    });
    pending.insert(it, p);
  };

  auto advance_to = [&](double target) {
    while (true) {
      double tb = target;
      for (const auto& a : active) tb = std::min(tb, a.t_end);
      if (!pending.empty()) tb = std::min(tb, pending.front().time);
      if (tb > t) adv.advance(y, tb - t, rates);
      t = tb;
      bool ended = false;
      for (auto it = active.begin(); it != active.end();) {
        if (it->t_end <= t) {
          it = active.erase(it);
          ended = true;
        } else {
          ++it;
        }
      }
      if (ended) rebuild_rates();
      while (!pending.empty() && pending.front().time <= t) {
        Pending p = pending.front();
        pending.erase(pending.begin());
        if (p.is_infusion) {
          start_infusion(p.cmt0, p.value, p.duration, p.origin_row);
        } else {
          y[p.cmt0] += T(p.value);
        }
      }
      if (t >= target) break;
    }
  };

  for (std::size_t j = 0; j < records.size(); ++j) {
    const EventRecord& rec = records[j];
    if (rec.time < t) {
      throw ValidationError("row " + std::to_string(rec.origin_row) +
                            ": records must be time-ordered within a subject");
    }
    advance_to(rec.time);

    if (rec.evid == 1) {
      const int cmt0 = rec.cmt - 1;
      if (cmt0 < 0 || static_cast<std::size_t>(cmt0) >= n) {
        throw ValidationError("row " + std::to_string(rec.origin_row) + ": cmt " +
                              std::to_string(rec.cmt) + " outside 1.." + std::to_string(n));
      }
      const double famt = dc.f[cmt0] * rec.amt;
      if (rec.ss == 1) {
        if (dc.tlag[cmt0] != 0.0) {
          throw ValidationError("row " + std::to_string(rec.origin_row) +
                                ": ss=1 with tlag on the dosed compartment is not supported");
        }
        if (rec.rate > 0.0 && famt / rec.rate > rec.ii * (1.0 + 1e-12)) {
          throw ValidationError("row " + std::to_string(rec.origin_row) +
                                ": steady-state infusion duration exceeds ii (overlapping "
                                "infusions are not supported)");
        }
        auto ss = adv.steady_state(cmt0, famt, rec.rate, rec.ii);
        y.assign(ss.begin(), ss.end());
        pending.clear();
        active.clear();
        rebuild_rates();
        if (rec.rate > 0.0) start_infusion(cmt0, rec.rate, famt / rec.rate, rec.origin_row);
      } else {
        const double t_apply = t + dc.tlag[cmt0];
        if (rec.rate > 0.0) {
          const double duration = famt / rec.rate;
          if (t_apply <= t) {
            start_infusion(cmt0, rec.rate, duration, rec.origin_row);
          } else {
            push_pending({t_apply, 0, true, cmt0, rec.rate, duration, rec.origin_row});
          }
        } else {
          if (t_apply <= t) {
            y[cmt0] += T(famt);
          } else {
            push_pending({t_apply, 0, false, cmt0, famt, 0.0, rec.origin_row});
          }
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) out(i, j) = y[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Advancers

template <typename T>
struct TwoCptAdvancer {
  TwoCptParams<T> p;

  std::size_t n_states() const { return 3; }

  void advance(std::vector<T>& y, double dt, std::span<const double> rates) const {
    auto out = twocpt_advance<T>({y[0], y[1], y[2]}, dt, p,
                                 {T(rates[0]), T(rates[1]), T(rates[2])});
    y.assign(out.begin(), out.end());
  }

  std::vector<T> steady_state(int cmt0, double famt, double rate, double ii) const {
    return detail::linear_steady_state<T>(
        3,
        [this, rate](std::vector<T>& y, double dt, int inf_cmt) {
          std::array<T, 3> r{T(0.0), T(0.0), T(0.0)};
          if (inf_cmt >= 0) r[inf_cmt] = T(rate);
          auto out = twocpt_advance<T>({y[0], y[1], y[2]}, dt, p, r);
          y.assign(out.begin(), out.end());
        },
        cmt0, famt, rate, ii);
  }
};

template <typename T>
struct OneCptAdvancer {
  OneCptParams<T> p;

  std::size_t n_states() const { return 2; }

  void advance(std::vector<T>& y, double dt, std::span<const double> rates) const {
    auto out = onecpt_advance<T>({y[0], y[1]}, dt, p, {T(rates[0]), T(rates[1])});
    y.assign(out.begin(), out.end());
  }

  std::vector<T> steady_state(int cmt0, double famt, double rate, double ii) const {
    return detail::linear_steady_state<T>(
        2,
        [this, rate](std::vector<T>& y, double dt, int inf_cmt) {
          std::array<T, 2> r{T(0.0), T(0.0)};
          if (inf_cmt >= 0) r[inf_cmt] = T(rate);
          auto out = onecpt_advance<T>({y[0], y[1]}, dt, p, r);
          y.assign(out.begin(), out.end());
        },
        cmt0, famt, rate, ii);
  }
};

// General numeric advancer: rhs(t, y, dydt) plus constant infusion rates.
// Steady state is found by cycle iteration, which assumes an autonomous rhs.
template <typename T, typename Rhs>
struct OdeAdvancer {
  Rhs rhs;
  std::size_t n;
  OdeControls ctrl;

  std::size_t n_states() const { return n; }

  void advance(std::vector<T>& y, double dt, std::span<const double> rates) const {
    bool any_rate = false;
    for (double r : rates) any_rate = any_rate || r != 0.0;
    auto wrapped = [&](double t, const std::vector<T>& yy, std::vector<T>& dy) {
      rhs(t, yy, dy);
      if (any_rate) {
        for (std::size_t i = 0; i < n; ++i) dy[i] += rates[i];
      }
    };
    rk45_integrate<T>(wrapped, y, 0.0, dt, ctrl);
  }

  std::vector<T> steady_state(int cmt0, double famt, double rate, double ii) const {
    std::vector<double> inf_rates(n, 0.0), no_rates(n, 0.0);
    const double tinf = rate > 0.0 ? famt / rate : 0.0;
    if (rate > 0.0) inf_rates[cmt0] = rate;
    // Advance-then-dose so the fixed point is the post-dose state, matching
    // the closed-form convention in linear_steady_state.
    return detail::cycle_steady_state<T>(std::vector<T>(n, T(0.0)), [&](std::vector<T>& y) {
      if (rate > 0.0) {
        advance(y, tinf, inf_rates);
        if (ii > tinf) advance(y, ii - tinf, no_rates);
      } else {
        advance(y, ii, no_rates);
        y[cmt0] += T(famt);
      }
    });
  }
};

// One-way coupled solver: the first three states follow analytic
// two-compartment kinetics evaluated inside the numeric step, the remaining
// n_pd states integrate pd_rhs(t, y_pd, y_pk, dydt_pd).
template <typename T, typename PdRhs>
struct CoupledTwoCptAdvancer {
  TwoCptParams<T> p;
  PdRhs pd_rhs;
  std::size_t n_pd;
  OdeControls ctrl;

  std::size_t n_states() const { return 3 + n_pd; }

  void advance(std::vector<T>& y, double dt, std::span<const double> rates) const {
    const std::array<T, 3> pk0{y[0], y[1], y[2]};
    const std::array<T, 3> pk_rates{T(rates[0]), T(rates[1]), T(rates[2])};
    bool any_pd_rate = false;
    for (std::size_t i = 0; i < n_pd; ++i) any_pd_rate = any_pd_rate || rates[3 + i] != 0.0;

    std::vector<T> ypd(y.begin() + 3, y.end());
    std::array<T, 3> pk_t;
    auto wrapped = [&](double t, const std::vector<T>& yy, std::vector<T>& dy) {
      pk_t = twocpt_advance<T>(pk0, t, p, pk_rates);
      pd_rhs(t, yy, pk_t, dy);
      if (any_pd_rate) {
        for (std::size_t i = 0; i < n_pd; ++i) dy[i] += rates[3 + i];
      }
    };
    rk45_integrate<T>(wrapped, ypd, 0.0, dt, ctrl);

    const auto pk1 = twocpt_advance<T>(pk0, dt, p, pk_rates);
    y[0] = pk1[0];
    y[1] = pk1[1];
    y[2] = pk1[2];
    std::copy(ypd.begin(), ypd.end(), y.begin() + 3);
  }

  std::vector<T> steady_state(int cmt0, double famt, double rate, double ii) const {
    const std::size_t n = n_states();
    std::vector<double> inf_rates(n, 0.0), no_rates(n, 0.0);
    const double tinf = rate > 0.0 ? famt / rate : 0.0;
    if (rate > 0.0) inf_rates[cmt0] = rate;
    return detail::cycle_steady_state<T>(std::vector<T>(n, T(0.0)), [&](std::vector<T>& y) {
      if (rate > 0.0) {
        advance(y, tinf, inf_rates);
        if (ii > tinf) advance(y, ii - tinf, no_rates);
      } else {
        advance(y, ii, no_rates);
        y[cmt0] += T(famt);
      }
    });
  }
};

// ---------------------------------------------------------------------------
// Entry points. Records must be a single subject's expanded schedule.

template <typename T>
Matrix<T> solve_linear_twocpt(std::span<const EventRecord> records, const TwoCptParams<T>& p,
                              const DoseControls& dc) {
  TwoCptAdvancer<T> adv{p};
  return solve_schedule<T>(records, dc, adv);
}

template <typename T>
Matrix<T> solve_linear_onecpt(std::span<const EventRecord> records, const OneCptParams<T>& p,
                              const DoseControls& dc) {
  OneCptAdvancer<T> adv{p};
  return solve_schedule<T>(records, dc, adv);
}

template <typename T, typename Rhs>
Matrix<T> solve_numeric(std::span<const EventRecord> records, std::size_t n_states, Rhs&& rhs,
                        const OdeControls& ctrl, const DoseControls& dc) {
  OdeAdvancer<T, Rhs> adv{std::forward<Rhs>(rhs), n_states, ctrl};
  return solve_schedule<T>(records, dc, adv);
}

template <typename T, typename PdRhs>
Matrix<T> solve_coupled_twocpt(std::span<const EventRecord> records, const TwoCptParams<T>& p,
                               std::size_t n_pd, PdRhs&& pd_rhs, const OdeControls& ctrl,
                               const DoseControls& dc) {
  CoupledTwoCptAdvancer<T, PdRhs> adv{p, std::forward<PdRhs>(pd_rhs), n_pd, ctrl};
  return solve_schedule<T>(records, dc, adv);
}

}  // namespace pmx

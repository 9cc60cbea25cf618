#include "pmx/mcstats.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "pmx/csv.hpp"

namespace pmx {

double inv_normal_cdf(double p) {
  // Wichura (1988), algorithm AS 241, routine PPND16.
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  if (r <= 0.0) return q < 0.0 ? -kInf : kInf;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
              3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
            4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
              6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
            2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
              2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
            5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
              1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
            5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -val : val;
}

double quantile_type7(std::vector<double> x, double p) {
  if (x.empty()) return kNaN;
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= x.size()) return x.back();
  return x[lo] + (h - lo) * (x[lo + 1] - x[lo]);
}

namespace {

bool all_finite(const VarChains& chains) {
  for (const auto& c : chains)
    for (double v : c)
      if (!std::isfinite(v)) return false;
  return true;
}

bool is_constant(const VarChains& chains) {
  const double first = chains[0][0];
  for (const auto& c : chains)
    for (double v : c)
      if (v != first) return false;
  return true;
}

std::vector<double> pool(const VarChains& chains) {
  std::vector<double> out;
  for (const auto& c : chains) out.insert(out.end(), c.begin(), c.end());
  return out;
}

// Halve each chain; odd lengths drop the middle draw.
VarChains split_halves(const VarChains& chains) {
  VarChains out;
  out.reserve(chains.size() * 2);
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + half);
    out.emplace_back(c.end() - half, c.end());
  }
  return out;
}

// Pooled fractional ranks (average over ties) mapped through the normal
// quantile function: z = Phi^{-1}((r - 3/8) / (S + 1/4)).
VarChains rank_normalize(const VarChains& chains) {
  std::vector<std::pair<double, std::size_t>> flat;  // value, flat index
  for (const auto& c : chains)
    for (double v : c) flat.emplace_back(v, flat.size());
  std::sort(flat.begin(), flat.end());
  const std::size_t s = flat.size();
  std::vector<double> z(s);
  for (std::size_t i = 0; i < s;) {
    std::size_t j = i;
    while (j + 1 < s && flat[j + 1].first == flat[i].first) ++j;
    const double rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    const double zi = inv_normal_cdf((rank - 0.375) / (static_cast<double>(s) + 0.25));
    for (std::size_t k = i; k <= j; ++k) z[flat[k].second] = zi;
    i = j + 1;
  }
  VarChains out(chains.size());
  std::size_t pos = 0;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    out[c].assign(z.begin() + pos, z.begin() + pos + chains[c].size());
    pos += chains[c].size();
  }
  return out;
}

// Plain between/within R-hat on an already-prepared chain set.
double rhat_basic(const VarChains& chains) {
  const std::size_t m = chains.size();
  if (m < 2 || chains[0].size() < 2) return kNaN;
  const double n = static_cast<double>(chains[0].size());
  std::vector<double> means(m), vars(m);
  for (std::size_t c = 0; c < m; ++c) {
    double mu = 0.0;
    for (double v : chains[c]) mu += v;
    mu /= n;
    double ss = 0.0;
    for (double v : chains[c]) ss += (v - mu) * (v - mu);
    means[c] = mu;
    vars[c] = ss / (n - 1.0);
  }
  double w = 0.0;
  for (double v : vars) w += v;
  w /= static_cast<double>(m);
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= static_cast<double>(m);
  double b_over_n = 0.0;
  for (double v : means) b_over_n += (v - grand) * (v - grand);
  b_over_n /= static_cast<double>(m - 1);
  if (!(w > 0.0)) return kNaN;
  return std::sqrt(((n - 1.0) / n * w + b_over_n) / w);
}

// Effective sample size with Geyer's initial monotone sequence estimator,
// applied to whatever transformation of the chains the caller prepared.
double ess_core(const VarChains& chains) {
  const std::size_t m = chains.size();
  if (m == 0) return kNaN;
  const std::size_t n = chains[0].size();
  if (n < 4) return kNaN;

  // biased autocovariance (denominator n) per chain
  std::vector<std::vector<double>> acov(m, std::vector<double>(n, 0.0));
  std::vector<double> cmeans(m);
  for (std::size_t c = 0; c < m; ++c) {
    double mu = 0.0;
    for (double v : chains[c]) mu += v;
    mu /= static_cast<double>(n);
    cmeans[c] = mu;
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i + k < n; ++i)
        s += (chains[c][i] - mu) * (chains[c][i + k] - mu);
      acov[c][k] = s / static_cast<double>(n);
    }
  }
  auto acov_mean = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += acov[c][k];
    return s / static_cast<double>(m);
  };

  const double dn = static_cast<double>(n);
  const double mean_var = acov_mean(0) * dn / (dn - 1.0);
  double var_plus = mean_var * (dn - 1.0) / dn;
  if (m > 1) {
    double grand = 0.0;
    for (double v : cmeans) grand += v;
    grand /= static_cast<double>(m);
    double b = 0.0;
    for (double v : cmeans) b += (v - grand) * (v - grand);
    var_plus += b / static_cast<double>(m - 1);
  }
  if (!(var_plus > 0.0) || !std::isfinite(var_plus)) return kNaN;

  std::vector<double> rho(n, 0.0);
  double rho_even = 1.0;
  rho[0] = rho_even;
  double rho_odd = 1.0 - (mean_var - acov_mean(1)) / var_plus;
  rho[1] = rho_odd;

  std::size_t s = 1;
  while (s < n - 4 && rho_even + rho_odd > 0.0) {
    rho_even = 1.0 - (mean_var - acov_mean(s + 1)) / var_plus;
    rho_odd = 1.0 - (mean_var - acov_mean(s + 2)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[s + 1] = rho_even;
      rho[s + 2] = rho_odd;
    }
    s += 2;
  }
  const std::size_t max_s = s;

  // Geyer initial monotone sequence
  for (std::size_t t = 1; t + 3 <= max_s; t += 2) {
    if (rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]) {
      rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
      rho[t + 2] = rho[t + 1];
    }
  }

  const double n_total = static_cast<double>(m) * dn;
  double tau = -1.0 + rho[max_s];
  for (std::size_t k = 0; k < max_s; ++k) tau += 2.0 * rho[k];
  // cap for antithetic chains, as in the reference estimator
  return std::min(n_total / tau, n_total * std::log10(n_total));
}

bool usable(const VarChains& chains) {
  if (chains.size() < 2) return false;
  const std::size_t n = chains[0].size();
  if (n < 4) return false;
  for (const auto& c : chains)
    if (c.size() != n) return false;
  return all_finite(chains) && !is_constant(chains);
}

}  // namespace

double split_rank_rhat(const VarChains& chains) {
  if (!usable(chains)) return kNaN;
  const VarChains sc = split_halves(chains);
  const double bulk = rhat_basic(rank_normalize(sc));

  const double med = quantile_type7(pool(sc), 0.5);
  VarChains folded = sc;
  for (auto& c : folded)
    for (double& v : c) v = std::fabs(v - med);
  const double fold = rhat_basic(rank_normalize(folded));
  if (std::isnan(bulk)) return fold;
  if (std::isnan(fold)) return bulk;
  return std::max(bulk, fold);
}

double split_rhat_classic(const VarChains& chains) {
  if (!usable(chains)) return kNaN;
  return rhat_basic(split_halves(chains));
}

double ess_bulk(const VarChains& chains) {
  if (!usable(chains)) return kNaN;
  return ess_core(rank_normalize(split_halves(chains)));
}

double ess_tail(const VarChains& chains) {
  if (!usable(chains)) return kNaN;
  const std::vector<double> pooled = pool(chains);
  double out = kNaN;
  for (double q : {0.05, 0.95}) {
    const double cut = quantile_type7(pooled, q);
    VarChains ind(chains.size());
    for (std::size_t c = 0; c < chains.size(); ++c) {
      ind[c].resize(chains[c].size());
      for (std::size_t i = 0; i < chains[c].size(); ++i)
        ind[c][i] = chains[c][i] <= cut ? 1.0 : 0.0;
    }
    const VarChains si = split_halves(ind);
    double e = is_constant(si) ? kNaN : ess_core(si);
    if (std::isnan(out) || e < out) out = e;
    if (std::isnan(e)) return kNaN;
  }
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<Matrix<double>>& chain_draws,
                                  const std::vector<std::string>& names) {
  if (chain_draws.empty()) throw ValidationError("summarize: no chains");
  const std::size_t n_var = chain_draws[0].cols();
  if (names.size() != n_var) throw ValidationError("summarize: name count mismatch");
  for (const auto& m : chain_draws)
    if (m.cols() != n_var) throw ValidationError("summarize: chains disagree on variable count");

  std::vector<SummaryRow> rows;
  rows.reserve(n_var);
  for (std::size_t v = 0; v < n_var; ++v) {
    VarChains chains(chain_draws.size());
    for (std::size_t c = 0; c < chain_draws.size(); ++c) {
      chains[c].resize(chain_draws[c].rows());
      for (std::size_t i = 0; i < chain_draws[c].rows(); ++i) chains[c][i] = chain_draws[c](i, v);
    }
    std::vector<double> pooled = pool(chains);
    SummaryRow row;
    row.variable = names[v];
    double mu = 0.0;
    for (double x : pooled) mu += x;
    mu /= static_cast<double>(pooled.size());
    row.mean = mu;
    row.median = quantile_type7(pooled, 0.5);
    double ss = 0.0;
    for (double x : pooled) ss += (x - mu) * (x - mu);
    row.sd = pooled.size() > 1 ? std::sqrt(ss / (static_cast<double>(pooled.size()) - 1.0)) : 0.0;
    std::vector<double> dev = pooled;
    for (double& x : dev) x = std::fabs(x - row.median);
    row.mad = 1.4826 * quantile_type7(dev, 0.5);
    row.q5 = quantile_type7(pooled, 0.05);
    row.q95 = quantile_type7(pooled, 0.95);
    row.rhat = split_rank_rhat(chains);
    row.ess_bulk = ess_bulk(chains);
    row.ess_tail = ess_tail(chains);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "variable,mean,median,sd,mad,q5,q95,rhat,ess_bulk,ess_tail\n";
  for (const auto& r : rows) {
    os << r.variable << ',' << format_double(r.mean) << ',' << format_double(r.median) << ','
       << format_double(r.sd) << ',' << format_double(r.mad) << ',' << format_double(r.q5) << ','
       << format_double(r.q95) << ',' << format_double(r.rhat) << ','
       << format_double(r.ess_bulk) << ',' << format_double(r.ess_tail) << '\n';
  }
}

namespace {

double log_sum_exp(const std::vector<double>& x) {
  double mx = -kInf;
  for (double v : x) mx = std::max(mx, v);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

struct GpdFit {
  double k_raw;   // used for sigma and the quantile function shape
  double k_reg;   // weakly-informative-prior adjusted, reported as khat
  double sigma;
};

// Zhang & Stephens (2009) posterior-mean estimator on a profile grid.
// x: sorted exceedances over the tail cutoff, all > 0.
GpdFit gpd_fit(const std::vector<double>& x) {
  const std::size_t n = x.size();
  const std::size_t grid = 30 + static_cast<std::size_t>(std::floor(std::sqrt(n)));
  const double xstar = x[static_cast<std::size_t>(std::floor(n / 4.0 + 0.5)) - 1];
  const double xmax = x.back();

  std::vector<double> b(grid), loglik(grid);
  for (std::size_t j = 0; j < grid; ++j) {
    b[j] = 1.0 / xmax +
           (1.0 - std::sqrt(static_cast<double>(grid) / (static_cast<double>(j) + 0.5))) /
               (3.0 * xstar);
    double k = 0.0;
    for (double v : x) k += std::log1p(-b[j] * v);
    k /= static_cast<double>(n);
    loglik[j] = static_cast<double>(n) * (std::log(-b[j] / k) - k - 1.0);
  }
  const double lse = log_sum_exp(loglik);
  double bhat = 0.0;
  for (std::size_t j = 0; j < grid; ++j) bhat += b[j] * std::exp(loglik[j] - lse);

  double k = 0.0;
  for (double v : x) k += std::log1p(-bhat * v);
  k /= static_cast<double>(n);
  GpdFit fit;
  fit.k_raw = k;
  fit.sigma = -k / bhat;
  fit.k_reg = (k * static_cast<double>(n) + 5.0) / (static_cast<double>(n) + 10.0);
  return fit;
}

// GPD quantile over threshold mu.
double gpd_quantile(double p, double mu, double k, double sigma) {
  if (std::fabs(k) < 1e-12) return mu - sigma * std::log1p(-p);
  return mu + sigma * std::expm1(-k * std::log1p(-p)) / k;
}

}  // namespace

LooResult psis_loo(const Matrix<double>& log_lik) {
  const std::size_t s_draws = log_lik.rows();
  const std::size_t n_obs = log_lik.cols();
  if (n_obs == 0) throw ValidationError("psis_loo: empty log-likelihood matrix");
  const std::size_t tail_len = static_cast<std::size_t>(
      std::ceil(std::min(0.2 * static_cast<double>(s_draws),
                         3.0 * std::sqrt(static_cast<double>(s_draws)))));
  if (tail_len < 5)
    throw ValidationError("psis_loo: " + std::to_string(s_draws) +
                          " draws leave a Pareto tail shorter than 5");

  LooResult out;
  out.pointwise.resize(n_obs);
  for (std::size_t j = 0; j < n_obs; ++j) {
    std::vector<double> ll(s_draws), lw(s_draws);
    for (std::size_t s = 0; s < s_draws; ++s) {
      ll[s] = log_lik(s, j);
      if (!std::isfinite(ll[s]))
        throw ValidationError("psis_loo: non-finite log_lik for observation " +
                              std::to_string(j + 1));
      lw[s] = -ll[s];
    }
    double mx = -kInf;
    for (double v : lw) mx = std::max(mx, v);
    for (double& v : lw) v -= mx;

    std::vector<std::size_t> order(s_draws);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return lw[a] < lw[b]; });

    const double lw_cut = lw[order[s_draws - tail_len - 1]];
    const double cut = std::exp(lw_cut);
    std::vector<double> exceed(tail_len);
    for (std::size_t z = 0; z < tail_len; ++z)
      exceed[z] = std::exp(lw[order[s_draws - tail_len + z]]) - cut;

    double khat = kNaN;
    if (exceed.back() > 1e-13) {
      const GpdFit fit = gpd_fit(exceed);
      khat = fit.k_reg;
      for (std::size_t z = 0; z < tail_len; ++z) {
        const double p = (static_cast<double>(z) + 0.5) / static_cast<double>(tail_len);
        const double q = gpd_quantile(p, cut, fit.k_reg, fit.sigma);
        // truncate at the largest raw ratio (0 on the shifted log scale)
        lw[order[s_draws - tail_len + z]] = std::min(std::log(q), 0.0);
      }
    }

    const double norm = log_sum_exp(lw);
    std::vector<double> lwl(s_draws);
    for (std::size_t s = 0; s < s_draws; ++s) lwl[s] = lw[s] - norm + ll[s];
    out.pointwise[j].elpd = log_sum_exp(lwl);
    out.pointwise[j].khat = khat;
  }

  double total = 0.0;
  for (const auto& p : out.pointwise) total += p.elpd;
  out.elpd_loo = total;
  const double mean = total / static_cast<double>(n_obs);
  double var = 0.0;
  for (const auto& p : out.pointwise) var += (p.elpd - mean) * (p.elpd - mean);
  var = n_obs > 1 ? var / (static_cast<double>(n_obs) - 1.0) : 0.0;
  out.se = std::sqrt(static_cast<double>(n_obs) * var);
  out.n_bad = 0;
  for (const auto& p : out.pointwise)
    if (p.khat > 0.7) ++out.n_bad;
  return out;
}

LooComparison loo_compare(const LooResult& a, const LooResult& b) {
  if (a.pointwise.size() != b.pointwise.size())
    throw ValidationError("loo_compare: fits have different observation counts");
  const std::size_t n = a.pointwise.size();
  double total = 0.0;
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = a.pointwise[i].elpd - b.pointwise[i].elpd;
    total += diff[i];
  }
  const double mean = total / static_cast<double>(n);
  double var = 0.0;
  for (double d : diff) var += (d - mean) * (d - mean);
  var = n > 1 ? var / (static_cast<double>(n) - 1.0) : 0.0;
  return {total, std::sqrt(static_cast<double>(n) * var)};
}

}  // namespace pmx

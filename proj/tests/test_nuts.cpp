#include "pmx/nuts.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "pmx/common.hpp"
#include "pmx/mcstats.hpp"

using namespace pmx;

namespace {

// Standard normal with the given per-coordinate scales: lp = -0.5 sum (q_i/s_i)^2.
Target gaussian_target(std::vector<double> scales) {
  Target t;
  t.dim = scales.size();
  t.log_joint_grad = [scales = std::move(scales)](std::span<const double> q) {
    GradResult r;
    r.grad.resize(q.size());
    double lp = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double z = q[i] / scales[i];
      lp -= 0.5 * z * z;
      r.grad[i] = -z / scales[i];
    }
    r.value = lp;
    r.value_finite = true;
    r.grad_finite = true;
    return r;
  };
  return t;
}

Target std_normal_target(std::size_t dim) { return gaussian_target(std::vector<double>(dim, 1.0)); }

std::vector<double> sampling_column(const ChainResult& r, std::size_t k) {
  std::vector<double> col;
  const std::size_t w = static_cast<std::size_t>(r.n_warmup);
  col.reserve(r.draws.rows() - w);
  for (std::size_t i = w; i < r.draws.rows(); ++i) col.push_back(r.draws(i, k));
  return col;
}

VarChains sampling_chains(const std::vector<ChainResult>& rs, std::size_t k) {
  VarChains out;
  for (const auto& r : rs) out.push_back(sampling_column(r, k));
  return out;
}

double mean_of(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sd_of(const std::vector<double>& x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / (static_cast<double>(x.size()) - 1.0));
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided Kolmogorov-Smirnov statistic against N(0, 1).
double ks_stat_std_normal(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std_normal_cdf(x[i]);
    d = std::max(d, std::max(f - static_cast<double>(i) / n,
                             static_cast<double>(i + 1) / n - f));
  }
  return d;
}

// Max |H - H0| along a leapfrog trajectory on the standard 1-D harmonic
// Hamiltonian starting from (q, p) = (1, 0).
double max_energy_error(double eps, int n_steps) {
  const Target t = std_normal_target(1);
  std::vector<double> q{1.0}, p{0.0}, grad{-1.0};
  double lp = -0.5;
  const std::vector<double> im{1.0};
  const double h0 = -lp + 0.5 * p[0] * p[0];
  double worst = 0.0;
  for (int s = 0; s < n_steps; ++s) {
    REQUIRE(leapfrog_step(t, q, p, grad, lp, eps, im));
    worst = std::max(worst, std::fabs((-lp + 0.5 * p[0] * p[0]) - h0));
  }
  return worst;
}

}  // namespace

TEST_SUITE("nuts") {
  TEST_CASE("leapfrog step matches the hand-computed update") {
    const Target t = std_normal_target(1);

    // Unit metric: p_half = 0.5 + 0.05*(-1) = 0.45, q' = 1 + 0.1*0.45 = 1.045,
    // p' = 0.45 + 0.05*(-1.045) = 0.39775.
    {
      std::vector<double> q{1.0}, p{0.5}, grad{-1.0};
      double lp = -0.5;
      const std::vector<double> im{1.0};
      CHECK(leapfrog_step(t, q, p, grad, lp, 0.1, im));
      CHECK(q[0] == doctest::Approx(1.045).epsilon(1e-15));
      CHECK(p[0] == doctest::Approx(0.39775).epsilon(1e-15));
      CHECK(grad[0] == doctest::Approx(-1.045).epsilon(1e-15));
      CHECK(lp == doctest::Approx(-0.5 * 1.045 * 1.045).epsilon(1e-15));
    }

    // Non-unit metric scales the drift: q' = 1 + 0.1*4*0.45 = 1.18,
    // p' = 0.45 + 0.05*(-1.18) = 0.391.
    {
      std::vector<double> q{1.0}, p{0.5}, grad{-1.0};
      double lp = -0.5;
      const std::vector<double> im{4.0};
      CHECK(leapfrog_step(t, q, p, grad, lp, 0.1, im));
      CHECK(q[0] == doctest::Approx(1.18).epsilon(1e-15));
      CHECK(p[0] == doctest::Approx(0.391).epsilon(1e-15));
    }
  }

  TEST_CASE("leapfrog is reversible: integrate, flip momentum, integrate, flip") {
    const Target t = gaussian_target({1.0, 2.5});
    const std::vector<double> im{2.0, 0.5};
    std::vector<double> q{0.3, -1.2}, p{0.8, 0.4};
    const std::vector<double> q0 = q, p0 = p;

    GradResult g0 = t.log_joint_grad(q);
    std::vector<double> grad = g0.grad;
    double lp = g0.value;
    for (int s = 0; s < 25; ++s) REQUIRE(leapfrog_step(t, q, p, grad, lp, 0.05, im));
    for (double& v : p) v = -v;
    for (int s = 0; s < 25; ++s) REQUIRE(leapfrog_step(t, q, p, grad, lp, 0.05, im));
    for (double& v : p) v = -v;

    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::fabs(q[i] - q0[i]) < 1e-10);
      CHECK(std::fabs(p[i] - p0[i]) < 1e-10);
    }
  }

  TEST_CASE("leapfrog energy error is second order: halving eps quarters it") {
    // Step counts chosen so both trajectories cover a full period (2*pi) of
    // the harmonic oscillator, so the max picks up the error amplitude.
    const double e1 = max_energy_error(0.2, 100);
    const double e2 = max_energy_error(0.1, 200);
    CHECK(e1 > 0.0);
    const double ratio = e1 / e2;
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
  }

  TEST_CASE("leapfrog with zero gradient is a pure metric-scaled drift") {
    Target t;
    t.dim = 2;
    t.log_joint_grad = [](std::span<const double> q) {
      GradResult r;
      r.value = 0.0;
      r.grad.assign(q.size(), 0.0);
      r.value_finite = true;
      r.grad_finite = true;
      return r;
    };
    const std::vector<double> im{2.0, 0.5};
    const double eps = 0.3;
    std::vector<double> q{1.0, -2.0}, p{0.7, 0.9}, grad{0.0, 0.0};
    double lp = 0.0;
    CHECK(leapfrog_step(t, q, p, grad, lp, eps, im));
    CHECK(q[0] == 1.0 + eps * im[0] * 0.7);
    CHECK(q[1] == -2.0 + eps * im[1] * 0.9);
    CHECK(p[0] == 0.7);
    CHECK(p[1] == 0.9);
  }

  TEST_CASE("leapfrog reports non-finite log density at the new point") {
    Target t;
    t.dim = 1;
    t.log_joint_grad = [](std::span<const double> q) {
      GradResult r;
      r.grad.assign(1, 0.0);
      if (q[0] > 1.0) {
        r.value = -kInf;
        r.value_finite = false;
        r.grad_finite = false;
        return r;
      }
      r.value = -0.5 * q[0] * q[0];
      r.grad[0] = -q[0];
      r.value_finite = true;
      r.grad_finite = true;
      return r;
    };
    std::vector<double> q{0.9}, p{5.0}, grad{-0.9};
    double lp = -0.5 * 0.81;
    const std::vector<double> im{1.0};
    CHECK_FALSE(leapfrog_step(t, q, p, grad, lp, 0.5, im));
  }

  TEST_CASE("standard normal in five dimensions is recovered to MCMC accuracy") {
    const Target t = std_normal_target(5);
    SamplerConfig cfg;
    cfg.chains = 4;
    cfg.warmup = 500;
    cfg.sampling = 500;
    cfg.seed = 20240814;
    const auto rs = nuts_sample(t, cfg);
    REQUIRE(rs.size() == 4);

    for (const auto& r : rs) {
      CHECK(r.n_warmup == 500);
      CHECK(r.draws.rows() == 1000);
      CHECK(r.draws.cols() == 5);
      CHECK(r.divergences_sampling == 0);
      // Adaptation should land near the unit metric and a reasonable step.
      CHECK(r.step_size > 0.2);
      CHECK(r.step_size < 3.0);
      for (double v : r.inv_metric) {
        CHECK(v > 0.5);
        CHECK(v < 2.0);
      }
      double acc = 0.0;
      for (std::size_t i = 500; i < 1000; ++i) {
        acc += r.accept_stat[i];
        CHECK(r.accept_stat[i] >= 0.0);
        CHECK(r.accept_stat[i] <= 1.0);
        CHECK(r.treedepth[i] >= 0);
        CHECK(r.treedepth[i] <= cfg.max_treedepth);
        // Hamiltonian = -lp + kinetic >= -lp.
        CHECK(r.energy[i] >= -r.lp[i] - 1e-12);
      }
      acc /= 500.0;
      CHECK(acc > 0.6);
      CHECK(acc < 0.99);
    }

    for (std::size_t k = 0; k < 5; ++k) {
      const VarChains chains = sampling_chains(rs, k);
      const double rhat = split_rank_rhat(chains);
      const double ess = ess_bulk(chains);
      CHECK(rhat < 1.01);
      CHECK(ess > 400.0);

      std::vector<double> pooled;
      for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
      const double m = mean_of(pooled);
      const double s = sd_of(pooled);
      const double mcse = s / std::sqrt(ess);
      CHECK(std::fabs(m) < 3.0 * mcse);
      CHECK(s > 0.85);
      CHECK(s < 1.15);
    }
  }

  TEST_CASE("anisotropic scales are absorbed into the adapted metric") {
    const Target t = gaussian_target({1.0, 10.0});
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 500;
    cfg.sampling = 300;
    cfg.seed = 7;
    const auto rs = nuts_sample(t, cfg);
    for (const auto& r : rs) {
      // Variances are 1 and 100; the regularized estimate keeps their order
      // of magnitude apart.
      CHECK(r.inv_metric[1] / r.inv_metric[0] > 20.0);
      CHECK(r.inv_metric[1] / r.inv_metric[0] < 500.0);
    }
    const VarChains c1 = sampling_chains(rs, 1);
    CHECK(split_rank_rhat(c1) < 1.05);
    std::vector<double> pooled;
    for (const auto& c : c1) pooled.insert(pooled.end(), c.begin(), c.end());
    CHECK(std::fabs(mean_of(pooled)) < 2.0);
    CHECK(sd_of(pooled) > 7.0);
    CHECK(sd_of(pooled) < 13.0);
  }

  TEST_CASE("a near-degenerate coordinate stays at its point mass") {
    const Target t = gaussian_target({1.0, 1e-6});
    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 500;
    cfg.sampling = 500;
    cfg.seed = 99;
    cfg.init_mode = InitMode::kValue;
    cfg.init_value = {0.0, 0.0};
    const auto rs = nuts_sample(t, cfg);
    const std::vector<double> tight = sampling_column(rs[0], 1);
    CHECK(sd_of(tight) <= 2e-6);
    for (double v : tight) CHECK(std::fabs(v) < 2e-5);
  }

  TEST_CASE("one-dimensional draws pass a KS test against N(0,1)") {
    const Target t = std_normal_target(1);
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 500;
    cfg.sampling = 2000;
    cfg.seed = 31;
    const auto rs = nuts_sample(t, cfg);
    std::vector<double> pooled;
    for (const auto& r : rs) {
      const auto col = sampling_column(r, 0);
      pooled.insert(pooled.end(), col.begin(), col.end());
      CHECK(r.divergences_sampling == 0);
    }
    REQUIRE(pooled.size() == 4000);
    CHECK(ks_stat_std_normal(pooled) < 0.05);
  }

  TEST_CASE("the same seed reproduces every stored number bit for bit") {
    const Target t = std_normal_target(3);
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 200;
    cfg.sampling = 200;
    cfg.seed = 4242;
    const auto a = nuts_sample(t, cfg);
    const auto b = nuts_sample(t, cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t c = 0; c < a.size(); ++c) {
      CHECK(a[c].draws.data() == b[c].draws.data());
      CHECK(a[c].lp == b[c].lp);
      CHECK(a[c].accept_stat == b[c].accept_stat);
      CHECK(a[c].treedepth == b[c].treedepth);
      CHECK(a[c].divergent == b[c].divergent);
      CHECK(a[c].energy == b[c].energy);
      CHECK(a[c].step_size == b[c].step_size);
      CHECK(a[c].inv_metric == b[c].inv_metric);
    }

    SamplerConfig other = cfg;
    other.seed = 4243;
    const auto d = nuts_sample(t, other);
    CHECK(d[0].draws.data() != a[0].draws.data());
  }

  TEST_CASE("chains are independent streams: adding chains never changes earlier ones") {
    const Target t = std_normal_target(2);
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 150;
    cfg.sampling = 150;
    cfg.seed = 555;
    const auto two = nuts_sample(t, cfg);
    cfg.chains = 4;
    const auto four = nuts_sample(t, cfg);
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(two[c].draws.data() == four[c].draws.data());
      CHECK(two[c].lp == four[c].lp);
      CHECK(two[c].energy == four[c].energy);
    }
    // And the chains themselves differ from one another.
    CHECK(four[0].draws.data() != four[1].draws.data());
  }

  TEST_CASE("a density cliff produces divergences that are counted exactly") {
    Target t;
    t.dim = 1;
    t.log_joint_grad = [](std::span<const double> q) {
      GradResult r;
      r.grad.assign(1, 0.0);
      if (q[0] >= 1.0) {
        r.value = -kInf;
        r.value_finite = false;
        r.grad_finite = false;
        return r;
      }
      r.value = -0.5 * q[0] * q[0];
      r.grad[0] = -q[0];
      r.value_finite = true;
      r.grad_finite = true;
      return r;
    };
    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 200;
    cfg.sampling = 400;
    cfg.seed = 2718;
    cfg.init_mode = InitMode::kValue;
    cfg.init_value = {0.0};
    const auto rs = nuts_sample(t, cfg);
    const ChainResult& r = rs[0];

    int flagged = 0;
    for (std::size_t i = 200; i < 600; ++i) flagged += r.divergent[i] ? 1 : 0;
    CHECK(r.divergences_sampling == flagged);
    CHECK(r.divergences_sampling > 0);
    // The sampler never accepts a point outside the support.
    for (std::size_t i = 0; i < r.draws.rows(); ++i) {
      CHECK(r.draws(i, 0) < 1.0);
      CHECK(std::isfinite(r.lp[i]));
    }
  }

  TEST_CASE("max treedepth saturation is recorded") {
    const Target t = std_normal_target(1);
    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 200;
    cfg.sampling = 300;
    cfg.seed = 17;
    cfg.max_treedepth = 1;
    const auto rs = nuts_sample(t, cfg);
    const ChainResult& r = rs[0];
    int at_cap = 0;
    for (std::size_t i = 200; i < 500; ++i) {
      CHECK(r.treedepth[i] <= 1);
      at_cap += r.treedepth[i] == 1 ? 1 : 0;
    }
    CHECK(r.max_depth_hits_sampling > 0);
    CHECK(r.max_depth_hits_sampling <= at_cap);
  }

  TEST_CASE("prior initialization uses draw_init; uniform cannot reach a far support") {
    // Support is (2, 4); the uniform(-2, 2) fallback can never produce a
    // finite density, while draw_init lands inside every time.
    Target t;
    t.dim = 1;
    t.log_joint_grad = [](std::span<const double> q) {
      GradResult r;
      r.grad.assign(1, 0.0);
      if (q[0] <= 2.0 || q[0] >= 4.0) {
        r.value = -kInf;
        r.value_finite = false;
        r.grad_finite = false;
        return r;
      }
      r.value = -50.0 * (q[0] - 3.0) * (q[0] - 3.0);
      r.grad[0] = -100.0 * (q[0] - 3.0);
      r.value_finite = true;
      r.grad_finite = true;
      return r;
    };
    t.draw_init = [](Rng& rng) { return std::vector<double>{3.0 + 0.05 * rng.normal()}; };

    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 150;
    cfg.sampling = 150;
    cfg.seed = 12;
    const auto rs = nuts_sample(t, cfg);
    const auto col = sampling_column(rs[0], 0);
    CHECK(std::fabs(mean_of(col) - 3.0) < 0.05);

    SamplerConfig uni = cfg;
    uni.init_mode = InitMode::kUniform;
    CHECK_THROWS_AS(nuts_sample(t, uni), NumericalError);
    try {
      nuts_sample(t, uni);
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("100 attempts") != std::string::npos);
      CHECK(std::string(e.what()).find("chain 1") != std::string::npos);
    }
  }

  TEST_CASE("sampling can be zero: warmup draws are retained") {
    const Target t = std_normal_target(2);
    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 50;
    cfg.sampling = 0;
    cfg.seed = 5;
    const auto rs = nuts_sample(t, cfg);
    CHECK(rs[0].n_warmup == 50);
    CHECK(rs[0].draws.rows() == 50);
    CHECK(rs[0].lp.size() == 50);
    CHECK(rs[0].step_size > 0.0);
  }

  TEST_CASE("configuration errors are rejected up front") {
    const Target t = std_normal_target(2);
    SamplerConfig cfg;

    SamplerConfig bad = cfg;
    bad.chains = 0;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.warmup = -1;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.warmup = 0;
    bad.sampling = 0;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.target_accept = 1.0;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.target_accept = 0.0;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.max_treedepth = 0;
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    bad = cfg;
    bad.init_mode = InitMode::kValue;
    bad.init_value = {1.0};  // dim is 2
    CHECK_THROWS_AS(nuts_sample(t, bad), ValidationError);

    Target empty;
    CHECK_THROWS_AS(nuts_sample(empty, cfg), ValidationError);
  }

  TEST_CASE("a fixed initial value outside the support fails immediately") {
    Target t;
    t.dim = 1;
    t.log_joint_grad = [](std::span<const double> q) {
      GradResult r;
      r.grad.assign(1, -q[0]);
      r.value = q[0] > 0.0 ? -0.5 * q[0] * q[0] : -kInf;
      r.value_finite = q[0] > 0.0;
      r.grad_finite = true;
      return r;
    };
    SamplerConfig cfg;
    cfg.chains = 1;
    cfg.warmup = 10;
    cfg.sampling = 10;
    cfg.init_mode = InitMode::kValue;
    cfg.init_value = {-1.0};
    CHECK_THROWS_AS(nuts_sample(t, cfg), NumericalError);
  }
}

#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "pmx/common.hpp"

namespace pmx {

// chains[c] holds one variable's draws from chain c; all chains equal length.
using VarChains = std::vector<std::vector<double>>;

// Phi^{-1}, Wichura's AS 241 (PPND16).
double inv_normal_cdf(double p);

// Type-7 (linear interpolation) sample quantile; x need not be sorted.
double quantile_type7(std::vector<double> x, double p);

// Rank-normalized split R-hat: max of the bulk and folded variants.
// Returns NaN for constant or non-finite input.
double split_rank_rhat(const VarChains& chains);

// Plain split R-hat on the raw draws (the intuitive between/within variance
// ratio, no rank transform). Unbounded for separated chains, unlike the
// rank-normalized statistic which saturates near 1.83 for two chains.
double split_rhat_classic(const VarChains& chains);

// Geyer initial-monotone-sequence ESS on rank-normalized split chains.
double ess_bulk(const VarChains& chains);

// min ESS of the {x <= q05} and {x >= q95} indicator chains.
double ess_tail(const VarChains& chains);

struct SummaryRow {
  std::string variable;
  double mean, median, sd, mad, q5, q95, rhat, ess_bulk, ess_tail;
};

// chain_draws[c] is an (iterations x variables) matrix of post-warmup draws.
std::vector<SummaryRow> summarize(const std::vector<Matrix<double>>& chain_draws,
                                  const std::vector<std::string>& names);

void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows);

struct LooPointwise {
  double elpd;
  double khat;
};

struct LooResult {
  double elpd_loo = 0.0;
  double se = 0.0;
  std::vector<LooPointwise> pointwise;
  int n_bad = 0;  // count of khat > 0.7
};

// log_lik: draws x observations, pooled over chains.
LooResult psis_loo(const Matrix<double>& log_lik);

struct LooComparison {
  double elpd_diff;  // a - b
  double se_diff;
};

LooComparison loo_compare(const LooResult& a, const LooResult& b);

}  // namespace pmx

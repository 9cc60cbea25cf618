#pragma once

// Built-in Bayesian models over clinical event schedules. A model owns its
// (addl-expanded) dataset and exposes the pieces the sampler and the CLI
// need: the unconstrained-space log joint with gradient, the constraining
// transform, generated quantities, prior draws for chain initialization and
// posterior-predictive replicates.
//
// Parameters are sampled on the unconstrained scale z and mapped through
// theta_i = lower_i + exp(z_i); every lower bound is either 0 or an
// expression in already-transformed components (the absorption-rate bound
// ka > lambda1), so the log Jacobian is always sum(z).

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/events.hpp"
#include "pmx/gradient.hpp"
#include "pmx/ivp.hpp"
#include "pmx/rng.hpp"

namespace pmx {

// Per-observation bookkeeping, ordered like Dataset::obs_index (original row
// order). Concentration observations that precede the subject's first dose
// are kept out of the likelihood: the model predicts exactly zero there and
// a lognormal density has no mass at zero. Their replicates are 0.
struct ObsInfo {
  std::size_t record_index = 0;  // into data().records
  std::size_t subject = 0;       // position into data().subject_spans
  double time = 0.0;
  int cmt = 0;
  bool concentration = true;  // false for the circulating-neutrophil stream
  bool in_likelihood = true;
};

struct LogJointParts {
  double prior = 0.0;
  double likelihood = 0.0;
  double jacobian = 0.0;
  double total() const { return prior + likelihood + jacobian; }
};

// Lognormal prior table of the neutropenia model: medians and log-scale sds.
struct FkPriorConfig {
  double cl = 10.0, cl_cv = 0.25;
  double q = 15.0, q_cv = 0.5;
  double v1 = 35.0, v1_cv = 0.25;
  double v2 = 105.0, v2_cv = 0.5;
  double ka = 2.5, ka_cv = 1.0;
  double mtt = 125.0, mtt_cv = 0.2;
  double circ0 = 5.0, circ0_cv = 0.2;
  double alpha = 3e-4, alpha_cv = 1.0;
  double gamma = 0.17, gamma_cv = 0.2;
};

struct ModelOptions {
  OdeControls ode{};
  bool fk_full_numeric = false;  // integrate all eight pkpd states numerically
  FkPriorConfig fk{};
  // Prior overrides, typically from a config file's [priors] section. Keys
  // are lowercase parameter names suffixed with _median or _sd for the
  // lognormal priors (cl, q, vc, vp, v, v1, v2, ka, mtt, circ0, alpha,
  // gamma), _sd alone for the half-normal scales (sigma, sigma_neut), and
  // omega_mu / omega_sd for the population model's log-scale omega prior.
  // Keys a model does not recognize are rejected.
  std::map<std::string, double> priors;
};

class Model {
 public:
  virtual ~Model() = default;

  virtual const std::string& name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual const std::vector<std::string>& param_names() const = 0;

  // Log joint density (prior + likelihood + transform Jacobian) at an
  // unconstrained point. Solver breakdowns and out-of-support states come
  // back as -inf rather than exceptions so the sampler can reject the point.
  virtual double log_joint(std::span<const double> z) const = 0;
  virtual GradResult log_joint_grad(std::span<const double> z) const = 0;
  virtual LogJointParts log_joint_parts(std::span<const double> z) const = 0;

  virtual std::vector<double> constrain(std::span<const double> z) const = 0;
  // Inverse of constrain; throws ValidationError (with the violated bound in
  // the message) when theta is outside the support.
  virtual std::vector<double> unconstrain(std::span<const double> theta) const = 0;
  virtual void validate_constrained(std::span<const double> theta) const = 0;

  virtual const std::vector<std::string>& gq_names() const = 0;
  virtual std::vector<double> generated_quantities(std::span<const double> theta,
                                                   Rng& rng) const = 0;

  // Posterior-predictive replicate of DV for every observation row, in
  // observation order. sigma == 0 returns the prediction itself.
  virtual std::vector<double> simulate_dv(std::span<const double> theta, Rng& rng) const = 0;

  // Unconstrained prior draw for chain initialization.
  virtual std::vector<double> draw_init(Rng& rng) const = 0;

  virtual const Dataset& data() const = 0;
  virtual const std::vector<ObsInfo>& obs_info() const = 0;
};

std::vector<std::string> builtin_model_names();
bool is_builtin_model(const std::string& name);

// name is one of "twocpt", "onecpt", "twocpt_pop", "fk_pkpd". The dataset is
// validated against the model (subject count, observation compartments,
// required covariates) and addl-expanded internally.
std::unique_ptr<Model> make_model(const std::string& name, const Dataset& data,
                                  const ModelOptions& opts = {});

// Friberg-Karlsson pkpd trajectory for fixed parameters over one subject's
// (already expanded) schedule: rows 0-2 are gut/central/peripheral amounts,
// rows 3-7 the five cell-lineage states as differences from the Circ0
// baseline. theta9 = {CL, Q, V1, V2, ka, MTT, Circ0, alpha, gamma}.
Matrix<double> fk_solve(std::span<const EventRecord> records, std::span<const double> theta9,
                        const OdeControls& ctrl, bool full_numeric);

}  // namespace pmx

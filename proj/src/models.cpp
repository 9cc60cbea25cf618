#include "pmx/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pmx/csv.hpp"
#include "pmx/densities.hpp"
#include "pmx/dual.hpp"
#include "pmx/lin_pk.hpp"
#include "pmx/schedule_solver.hpp"

namespace pmx {
namespace {

// Floor under the circulating-cell state inside the feedback term.
constexpr double kCircFloor = std::numeric_limits<double>::epsilon();

struct LognormalPrior {
  double median;
  double sd;  // log-scale standard deviation
};

constexpr std::array<LognormalPrior, 5> kTwocptPriors{
    {{10.0, 0.25}, {15.0, 0.5}, {35.0, 0.25}, {105.0, 0.5}, {2.5, 1.0}}};
constexpr std::array<LognormalPrior, 3> kOnecptPriors{{{10.0, 0.25}, {35.0, 0.25}, {2.5, 1.0}}};

// Applies ModelOptions::priors to a model's prior table. Every recognized key
// is recorded as it is looked up; finish() then rejects leftovers so a typo
// cannot silently fall back to the default prior.
class PriorOverrides {
 public:
  explicit PriorOverrides(const std::map<std::string, double>& kv) : kv_(kv) {}

  LognormalPrior lognormal(const std::string& name, LognormalPrior def) {
    def.median = get(name + "_median", def.median, true);
    def.sd = get(name + "_sd", def.sd, true);
    return def;
  }

  // Half-normal scale, e.g. sigma_sd.
  double scale(const std::string& name, double def) { return get(name + "_sd", def, true); }

  // Log-scale location (may be any real), e.g. omega_mu.
  double location(const std::string& name, double def) {
    return get(name + "_mu", def, false);
  }

  void finish(const std::string& model) const {
    for (const auto& [key, value] : kv_) {
      (void)value;
      if (std::find(used_.begin(), used_.end(), key) == used_.end()) {
        throw ValidationError("unknown prior override '" + key + "' for model " + model);
      }
    }
  }

 private:
  double get(const std::string& key, double def, bool positive) {
    used_.push_back(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (!std::isfinite(it->second) || (positive && !(it->second > 0.0))) {
      throw ValidationError("prior override " + key + " must be " +
                            (positive ? "positive" : "finite") + "; got " +
                            format_double(it->second));
    }
    return it->second;
  }

  const std::map<std::string, double>& kv_;
  std::vector<std::string> used_;
};

// ---------------------------------------------------------------------------
// Dataset checks shared by the models.

void require_single_subject(const Dataset& ds, const std::string& model) {
  if (ds.n_subjects() != 1) {
    throw ValidationError("model " + model + " expects a single-subject dataset; got " +
                          std::to_string(ds.n_subjects()) + " subjects");
  }
}

void require_obs_cmt(const Dataset& ds, std::initializer_list<int> allowed,
                     const std::string& model) {
  for (std::size_t pos : ds.obs_index) {
    const EventRecord& r = ds.records[pos];
    bool ok = false;
    for (int c : allowed) ok = ok || r.cmt == c;
    if (!ok) {
      std::string list;
      for (int c : allowed) list += (list.empty() ? "" : " or ") + std::to_string(c);
      throw ValidationError("row " + std::to_string(r.origin_row) + ": model " + model +
                            " observations must be in compartment " + list + "; got " +
                            std::to_string(r.cmt));
    }
  }
}

std::size_t subject_of_record(const Dataset& ds, std::size_t pos) {
  for (std::size_t s = 0; s < ds.subject_spans.size(); ++s) {
    if (pos >= ds.subject_spans[s].first && pos < ds.subject_spans[s].second) return s;
  }
  throw ValidationError("record index outside any subject span");
}

// Observation metadata in input-row order. An observation enters the
// likelihood unless its DV is missing, or it is a concentration reading
// taken before the subject's first dose (the model predicts exactly zero
// there, outside the lognormal support).
std::vector<ObsInfo> build_obs_info(const Dataset& ds, int conc_cmt) {
  std::vector<std::size_t> first_dose(ds.n_subjects());
  for (std::size_t s = 0; s < ds.n_subjects(); ++s) {
    const auto [b, e] = ds.subject_spans[s];
    std::size_t fd = e;
    for (std::size_t i = b; i < e; ++i) {
      if (ds.records[i].evid == 1) {
        fd = i;
        break;
      }
    }
    first_dose[s] = fd;
  }
  std::vector<ObsInfo> out;
  out.reserve(ds.obs_index.size());
  for (std::size_t pos : ds.obs_index) {
    const EventRecord& r = ds.records[pos];
    ObsInfo o;
    o.record_index = pos;
    o.subject = subject_of_record(ds, pos);
    o.time = r.time;
    o.cmt = r.cmt;
    o.concentration = (r.cmt == conc_cmt);
    o.in_likelihood =
        std::isfinite(r.dv) && !(o.concentration && pos < first_dose[o.subject]);
    out.push_back(o);
  }
  return out;
}

void check_positive_dv(const Dataset& ds, const std::vector<ObsInfo>& obs) {
  for (const ObsInfo& o : obs) {
    if (!o.in_likelihood) continue;
    const EventRecord& r = ds.records[o.record_index];
    if (!(r.dv > 0.0)) {
      throw ValidationError("row " + std::to_string(r.origin_row) +
                            ": DV must be positive under a lognormal observation model; got " +
                            format_double(r.dv));
    }
  }
}

std::size_t count_in_likelihood(const std::vector<ObsInfo>& obs) {
  std::size_t n = 0;
  for (const ObsInfo& o : obs) n += o.in_likelihood ? 1 : 0;
  return n;
}

void append_indexed(std::vector<std::string>& names, const std::string& base, std::size_t n) {
  for (std::size_t k = 1; k <= n; ++k) names.push_back(base + "." + std::to_string(k));
}

// Predictive replicate; a zero prediction (pre-dose concentration) has no
// lognormal replicate and reports 0, and sigma == 0 returns the prediction
// itself rather than exp(log(pred)).
double replicate_lognormal(double pred, double sigma, Rng& rng) {
  if (!(pred > 0.0)) return 0.0;
  if (sigma == 0.0) return pred;
  return rng.lognormal(std::log(pred), sigma);
}

void check_positive(const std::string& name, double v) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ValidationError(name + " must be positive; got " + format_double(v));
  }
}

// Sampling requires sigma > 0; simulation additionally admits sigma == 0
// (noise-free replicates equal to the prediction).
void check_sigma(const std::string& name, double v, bool allow_zero) {
  if (allow_zero) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError(name + " must be non-negative; got " + format_double(v));
    }
  } else {
    check_positive(name, v);
  }
}

// ---------------------------------------------------------------------------
// Shared plumbing: the log joint, its gradient and the constraining map are
// all driven by one templated evaluation in the derived model.

template <typename Derived>
class ModelBase : public Model {
 public:
  const std::string& name() const override { return name_; }
  std::size_t dim() const override { return pnames_.size(); }
  const std::vector<std::string>& param_names() const override { return pnames_; }
  const std::vector<std::string>& gq_names() const override { return gqnames_; }
  const Dataset& data() const override { return ds_; }
  const std::vector<ObsInfo>& obs_info() const override { return obs_; }

  double log_joint(std::span<const double> z) const override {
    check_len(z.size(), "unconstrained parameter vector");
    return self().template lj<double>(z, nullptr);
  }

  GradResult log_joint_grad(std::span<const double> z) const override {
    check_len(z.size(), "unconstrained parameter vector");
    return gradient(
        [this](std::span<const Dual8> zd) { return self().template lj<Dual8>(zd, nullptr); },
        z);
  }

  LogJointParts log_joint_parts(std::span<const double> z) const override {
    check_len(z.size(), "unconstrained parameter vector");
    LogJointParts parts;
    self().template lj<double>(z, &parts);
    return parts;
  }

  std::vector<double> constrain(std::span<const double> z) const override {
    check_len(z.size(), "unconstrained parameter vector");
    std::vector<double> theta;
    double logjac = 0.0;
    self().template constrain_impl<double>(z, theta, logjac);
    return theta;
  }

 protected:
  void check_len(std::size_t got, const char* what) const {
    if (got != dim()) {
      throw ValidationError(std::string(what) + " has length " + std::to_string(got) +
                            "; model " + name_ + " has dimension " + std::to_string(dim()));
    }
  }

  // Wraps the constrained evaluation: accumulates priors + likelihood +
  // Jacobian, converts solver breakdowns and NaN into -inf.
  template <typename T, typename Body>
  T lj_guard(Body&& body, LogJointParts* parts) const {
    T lprior(0.0), llik(0.0), logjac(0.0);
    bool failed = false;
    try {
      body(lprior, llik, logjac);
    } catch (const NumericalError&) {
      failed = true;
    }
    if (failed || std::isnan(value_of(llik))) llik = T(-kInf);
    if (parts) {
      parts->prior = value_of(lprior);
      parts->likelihood = value_of(llik);
      parts->jacobian = value_of(logjac);
    }
    const T total = lprior + llik + logjac;
    if (std::isnan(value_of(total))) return T(-kInf);
    return total;
  }

  Dataset ds_;
  std::string name_;
  std::vector<std::string> pnames_, gqnames_;
  std::vector<ObsInfo> obs_;
  std::size_t n_ll_ = 0;

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

// ---------------------------------------------------------------------------
// One- and two-compartment single-subject models. Parameters (constrained):
// twocpt {CL, Q, VC, VP, ka, sigma}, onecpt {CL, V, ka, sigma}; all positive
// through theta = exp(z); lognormal priors on the kinetics, half-normal on
// sigma; lognormal observation density on the central concentration.

class LinearModel final : public ModelBase<LinearModel> {
 public:
  LinearModel(const Dataset& raw, bool twocpt, const ModelOptions& opts) : two_(twocpt) {
    name_ = two_ ? "twocpt" : "onecpt";
    ds_ = expand_addl(raw);
    require_single_subject(ds_, name_);
    require_obs_cmt(ds_, {2}, name_);
    obs_ = build_obs_info(ds_, 2);
    check_positive_dv(ds_, obs_);
    PriorOverrides ov(opts.priors);
    if (two_) {
      pnames_ = {"CL", "Q", "VC", "VP", "ka", "sigma"};
      priors_.assign(kTwocptPriors.begin(), kTwocptPriors.end());
      const char* keys[] = {"cl", "q", "vc", "vp", "ka"};
      for (std::size_t i = 0; i < 5; ++i) priors_[i] = ov.lognormal(keys[i], priors_[i]);
    } else {
      pnames_ = {"CL", "V", "ka", "sigma"};
      priors_.assign(kOnecptPriors.begin(), kOnecptPriors.end());
      const char* keys[] = {"cl", "v", "ka"};
      for (std::size_t i = 0; i < 3; ++i) priors_[i] = ov.lognormal(keys[i], priors_[i]);
    }
    sigma_scale_ = ov.scale("sigma", 1.0);
    ov.finish(name_);
    n_ll_ = count_in_likelihood(obs_);
    append_indexed(gqnames_, "log_lik", n_ll_);
    append_indexed(gqnames_, "cObsPred", obs_.size());
  }

  template <typename T>
  void constrain_impl(std::span<const T> z, std::vector<T>& theta, T& logjac) const {
    theta.resize(dim());
    for (std::size_t i = 0; i < dim(); ++i) {
      theta[i] = exp(z[i]);
      logjac += z[i];
    }
  }

  template <typename T>
  T lj(std::span<const T> z, LogJointParts* parts) const {
    return lj_guard<T>(
        [&](T& lprior, T& llik, T& logjac) {
          std::vector<T> theta;
          constrain_impl<T>(z, theta, logjac);
          const std::size_t np = priors_.size();
          for (std::size_t i = 0; i < np; ++i) {
            lprior += lognormal_lpdf(theta[i], std::log(priors_[i].median), priors_[i].sd);
          }
          lprior += half_normal_lpdf(theta[np], sigma_scale_);

          const T vc = theta[two_ ? 2 : 1];
          const T sigma = theta[np];
          const Matrix<T> sol = solve<T>(theta);
          for (const ObsInfo& o : obs_) {
            if (!o.in_likelihood) continue;
            const T chat = sol(1, o.record_index) / vc;
            llik += lognormal_lpdf(ds_.records[o.record_index].dv, log(chat), sigma);
          }
        },
        parts);
  }

  std::vector<double> unconstrain(std::span<const double> theta) const override {
    validate_constrained(theta);
    std::vector<double> z(dim());
    for (std::size_t i = 0; i < dim(); ++i) z[i] = std::log(theta[i]);
    return z;
  }

  void validate_constrained(std::span<const double> theta) const override {
    validate_params(theta, false);
  }

  std::vector<double> generated_quantities(std::span<const double> theta,
                                           Rng& rng) const override {
    validate_constrained(theta);
    const std::vector<double> th(theta.begin(), theta.end());
    const Matrix<double> sol = solve<double>(th);
    const double vc = th[two_ ? 2 : 1];
    const double sigma = th.back();
    std::vector<double> out;
    out.reserve(gqnames_.size());
    for (const ObsInfo& o : obs_) {
      if (!o.in_likelihood) continue;
      const double chat = sol(1, o.record_index) / vc;
      out.push_back(lognormal_lpdf(ds_.records[o.record_index].dv, std::log(chat), sigma));
    }
    for (const ObsInfo& o : obs_) {
      out.push_back(replicate_lognormal(sol(1, o.record_index) / vc, sigma, rng));
    }
    return out;
  }

  std::vector<double> simulate_dv(std::span<const double> theta, Rng& rng) const override {
    validate_params(theta, true);
    const std::vector<double> th(theta.begin(), theta.end());
    const Matrix<double> sol = solve<double>(th);
    const double vc = th[two_ ? 2 : 1];
    const double sigma = th.back();
    std::vector<double> out;
    out.reserve(obs_.size());
    for (const ObsInfo& o : obs_) {
      out.push_back(replicate_lognormal(sol(1, o.record_index) / vc, sigma, rng));
    }
    return out;
  }

  std::vector<double> draw_init(Rng& rng) const override {
    std::vector<double> theta(dim());
    for (std::size_t i = 0; i < priors_.size(); ++i) {
      theta[i] = rng.lognormal(std::log(priors_[i].median), priors_[i].sd);
    }
    theta[priors_.size()] = sigma_scale_ * std::fabs(rng.normal());
    return unconstrain(theta);
  }

 private:
  void validate_params(std::span<const double> theta, bool allow_zero_sigma) const {
    check_len(theta.size(), "parameter vector");
    for (std::size_t i = 0; i < priors_.size(); ++i) check_positive(pnames_[i], theta[i]);
    check_sigma(pnames_.back(), theta[priors_.size()], allow_zero_sigma);
  }

  template <typename T>
  Matrix<T> solve(const std::vector<T>& theta) const {
    const std::span<const EventRecord> recs(ds_.records);
    if (two_) {
      const TwoCptParams<T> p{theta[0], theta[1], theta[2], theta[3], theta[4]};
      return solve_linear_twocpt<T>(recs, p, DoseControls::defaults(3));
    }
    const OneCptParams<T> p{theta[0], theta[1], theta[2]};
    return solve_linear_onecpt<T>(recs, p, DoseControls::defaults(2));
  }

  bool two_;
  std::vector<LognormalPrior> priors_;
  double sigma_scale_ = 1.0;
};

// ---------------------------------------------------------------------------
// Population two-compartment model. Constrained layout:
//   [0..4]  CL_pop, Q_pop, VC_pop, VP_pop, ka_pop
//   [5..9]  omega_CL..omega_ka    (between-subject log-scale sds)
//   [10]    sigma
//   [11+5j .. 15+5j]  theta_*.j+1 (normalized subject parameters)
// Subject kinetics scale allometrically with WT: clearances by (WT/70)^0.75,
// volumes by WT/70, ka unscaled. Both ka_pop and each subject's ka are kept
// above the fast eigenvalue lambda1 of the corresponding (scaled) kinetics,
// which pins the fast-absorption side of the flip-flop ambiguity.

class PopModel final : public ModelBase<PopModel> {
 public:
  PopModel(const Dataset& raw, const ModelOptions& opts) {
    name_ = "twocpt_pop";
    ds_ = expand_addl(raw);
    require_obs_cmt(ds_, {2}, name_);
    obs_ = build_obs_info(ds_, 2);
    check_positive_dv(ds_, obs_);
    nsub_ = ds_.n_subjects();
    sw075_.resize(nsub_);
    sw1_.resize(nsub_);
    for (std::size_t j = 0; j < nsub_; ++j) {
      const double wt = subject_covariate(ds_, j, "WT");
      if (!(wt > 0.0)) {
        throw ValidationError("subject " + std::to_string(ds_.subject_ids[j]) +
                              ": WT must be positive; got " + format_double(wt));
      }
      sw075_[j] = allometric_scale(wt, 0.75);
      sw1_[j] = allometric_scale(wt, 1.0);
    }
    subj_obs_.resize(nsub_);
    for (std::size_t k = 0; k < obs_.size(); ++k) subj_obs_[obs_[k].subject].push_back(k);

    pnames_ = {"CL_pop",   "Q_pop",   "VC_pop",   "VP_pop",   "ka_pop",  "omega_CL",
               "omega_Q",  "omega_VC", "omega_VP", "omega_ka", "sigma"};
    for (std::size_t j = 1; j <= nsub_; ++j) {
      for (const char* base : {"theta_CL", "theta_Q", "theta_VC", "theta_VP", "theta_ka"}) {
        pnames_.push_back(std::string(base) + "." + std::to_string(j));
      }
    }
    PriorOverrides ov(opts.priors);
    priors_.assign(kTwocptPriors.begin(), kTwocptPriors.end());
    const char* keys[] = {"cl", "q", "vc", "vp", "ka"};
    for (std::size_t p = 0; p < 5; ++p) priors_[p] = ov.lognormal(keys[p], priors_[p]);
    omega_mu_ = ov.location("omega", 0.25);
    omega_sd_ = ov.scale("omega", 0.1);
    sigma_scale_ = ov.scale("sigma", 1.0);
    ov.finish(name_);

    n_ll_ = count_in_likelihood(obs_);
    append_indexed(gqnames_, "log_lik", n_ll_);
    append_indexed(gqnames_, "cObsPred", obs_.size());
    append_indexed(gqnames_, "cObsPredNew", obs_.size());
  }

  // Subject kinetics from the normalized block, allometrically scaled.
  template <typename T>
  TwoCptParams<T> subject_params(std::span<const T> theta, std::size_t j) const {
    const std::size_t base = kFixed + 5 * j;
    return TwoCptParams<T>{theta[base + 0] * sw075_[j], theta[base + 1] * sw075_[j],
                           theta[base + 2] * sw1_[j], theta[base + 3] * sw1_[j],
                           theta[base + 4]};
  }

  template <typename T>
  void constrain_impl(std::span<const T> z, std::vector<T>& theta, T& logjac) const {
    theta.resize(dim());
    for (std::size_t i = 0; i < 4; ++i) {
      theta[i] = exp(z[i]);
      logjac += z[i];
    }
    theta[4] = lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]) + exp(z[4]);
    logjac += z[4];
    for (std::size_t i = 5; i < kFixed; ++i) {
      theta[i] = exp(z[i]);
      logjac += z[i];
    }
    for (std::size_t j = 0; j < nsub_; ++j) {
      const std::size_t base = kFixed + 5 * j;
      for (std::size_t p = 0; p < 4; ++p) {
        theta[base + p] = exp(z[base + p]);
        logjac += z[base + p];
      }
      const T lb = lambda1_twocpt(theta[base + 0] * sw075_[j], theta[base + 1] * sw075_[j],
                                  theta[base + 2] * sw1_[j], theta[base + 3] * sw1_[j]);
      theta[base + 4] = lb + exp(z[base + 4]);
      logjac += z[base + 4];
    }
  }

  template <typename T>
  T lj(std::span<const T> z, LogJointParts* parts) const {
    return lj_guard<T>(
        [&](T& lprior, T& llik, T& logjac) {
          std::vector<T> theta;
          constrain_impl<T>(z, theta, logjac);
          for (std::size_t p = 0; p < 5; ++p) {
            lprior += lognormal_lpdf(theta[p], std::log(priors_[p].median), priors_[p].sd);
            lprior += lognormal_lpdf(theta[5 + p], omega_mu_, omega_sd_);
          }
          const T sigma = theta[10];
          lprior += half_normal_lpdf(sigma, sigma_scale_);

          for (std::size_t j = 0; j < nsub_; ++j) {
            const std::size_t base = kFixed + 5 * j;
            for (std::size_t p = 0; p < 5; ++p) {
              lprior += lognormal_lpdf(theta[base + p], log(theta[p]), theta[5 + p]);
            }
            const TwoCptParams<T> sp = subject_params<T>(std::span<const T>(theta), j);
            const auto [b, e] = ds_.subject_spans[j];
            const Matrix<T> sol = solve_linear_twocpt<T>(
                std::span<const EventRecord>(ds_.records).subspan(b, e - b), sp,
                DoseControls::defaults(3));
            for (std::size_t k : subj_obs_[j]) {
              const ObsInfo& o = obs_[k];
              if (!o.in_likelihood) continue;
              const T chat = sol(1, o.record_index - b) / sp.vc;
              llik += lognormal_lpdf(ds_.records[o.record_index].dv, log(chat), sigma);
            }
          }
        },
        parts);
  }

  std::vector<double> unconstrain(std::span<const double> theta) const override {
    validate_constrained(theta);
    std::vector<double> z(dim());
    for (std::size_t i = 0; i < 4; ++i) z[i] = std::log(theta[i]);
    z[4] = std::log(theta[4] - lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]));
    for (std::size_t i = 5; i < kFixed; ++i) z[i] = std::log(theta[i]);
    for (std::size_t j = 0; j < nsub_; ++j) {
      const std::size_t base = kFixed + 5 * j;
      for (std::size_t p = 0; p < 4; ++p) z[base + p] = std::log(theta[base + p]);
      const TwoCptParams<double> sp = subject_params<double>(theta, j);
      z[base + 4] = std::log(theta[base + 4] - lambda1_twocpt(sp.cl, sp.q, sp.vc, sp.vp));
    }
    return z;
  }

  void validate_constrained(std::span<const double> theta) const override {
    validate_params(theta, false);
  }

  std::vector<double> generated_quantities(std::span<const double> theta,
                                           Rng& rng) const override {
    validate_constrained(theta);
    const double sigma = theta[10];
    std::vector<double> pred(obs_.size(), 0.0), ll;
    ll.reserve(n_ll_);
    for (std::size_t j = 0; j < nsub_; ++j) {
      const TwoCptParams<double> sp = subject_params<double>(theta, j);
      const auto [b, e] = ds_.subject_spans[j];
      const Matrix<double> sol = solve_linear_twocpt<double>(
          std::span<const EventRecord>(ds_.records).subspan(b, e - b), sp,
          DoseControls::defaults(3));
      for (std::size_t k : subj_obs_[j]) {
        pred[k] = sol(1, obs_[k].record_index - b) / sp.vc;
      }
    }
    std::vector<double> out;
    out.reserve(gqnames_.size());
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      if (!obs_[k].in_likelihood) continue;
      out.push_back(
          lognormal_lpdf(ds_.records[obs_[k].record_index].dv, std::log(pred[k]), sigma));
    }
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      out.push_back(replicate_lognormal(pred[k], sigma, rng));
    }
    // New-subject predictions: redraw each subject's kinetics from the
    // population, keep the subject's weight and schedule.
    std::vector<double> pred_new(obs_.size(), 0.0);
    for (std::size_t j = 0; j < nsub_; ++j) {
      std::array<double, 5> tn;
      for (std::size_t p = 0; p < 5; ++p) {
        tn[p] = rng.lognormal(std::log(theta[p]), theta[5 + p]);
      }
      const TwoCptParams<double> sp{tn[0] * sw075_[j], tn[1] * sw075_[j], tn[2] * sw1_[j],
                                    tn[3] * sw1_[j], tn[4]};
      const auto [b, e] = ds_.subject_spans[j];
      const Matrix<double> sol = solve_linear_twocpt<double>(
          std::span<const EventRecord>(ds_.records).subspan(b, e - b), sp,
          DoseControls::defaults(3));
      for (std::size_t k : subj_obs_[j]) {
        pred_new[k] = sol(1, obs_[k].record_index - b) / sp.vc;
      }
    }
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      out.push_back(replicate_lognormal(pred_new[k], sigma, rng));
    }
    return out;
  }

  std::vector<double> simulate_dv(std::span<const double> theta, Rng& rng) const override {
    validate_params(theta, true);
    const double sigma = theta[10];
    std::vector<double> pred(obs_.size(), 0.0);
    for (std::size_t j = 0; j < nsub_; ++j) {
      const TwoCptParams<double> sp = subject_params<double>(theta, j);
      const auto [b, e] = ds_.subject_spans[j];
      const Matrix<double> sol = solve_linear_twocpt<double>(
          std::span<const EventRecord>(ds_.records).subspan(b, e - b), sp,
          DoseControls::defaults(3));
      for (std::size_t k : subj_obs_[j]) {
        pred[k] = sol(1, obs_[k].record_index - b) / sp.vc;
      }
    }
    std::vector<double> out;
    out.reserve(obs_.size());
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      out.push_back(replicate_lognormal(pred[k], sigma, rng));
    }
    return out;
  }

  std::vector<double> draw_init(Rng& rng) const override {
    std::vector<double> theta(dim());
    for (std::size_t p = 0; p < 4; ++p) {
      theta[p] = rng.lognormal(std::log(priors_[p].median), priors_[p].sd);
    }
    theta[4] = draw_above(rng, std::log(priors_[4].median), priors_[4].sd,
                          lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]));
    for (std::size_t p = 0; p < 5; ++p) theta[5 + p] = rng.lognormal(omega_mu_, omega_sd_);
    theta[10] = sigma_scale_ * std::fabs(rng.normal());
    for (std::size_t j = 0; j < nsub_; ++j) {
      const std::size_t base = kFixed + 5 * j;
      for (std::size_t p = 0; p < 4; ++p) {
        theta[base + p] = rng.lognormal(std::log(theta[p]), theta[5 + p]);
      }
      const double lb =
          lambda1_twocpt(theta[base + 0] * sw075_[j], theta[base + 1] * sw075_[j],
                         theta[base + 2] * sw1_[j], theta[base + 3] * sw1_[j]);
      theta[base + 4] = draw_above(rng, std::log(theta[4]), theta[9], lb);
    }
    return unconstrain(theta);
  }

 private:
  void validate_params(std::span<const double> theta, bool allow_zero_sigma) const {
    check_len(theta.size(), "parameter vector");
    for (std::size_t i = 0; i < dim(); ++i) {
      if (i == 10) {
        check_sigma(pnames_[i], theta[i], allow_zero_sigma);
      } else {
        check_positive(pnames_[i], theta[i]);
      }
    }
    const double lb_pop = lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]);
    if (!(theta[4] > lb_pop)) {
      throw ValidationError("ka_pop must exceed lambda1 = " + format_double(lb_pop) +
                            "; got " + format_double(theta[4]));
    }
    for (std::size_t j = 0; j < nsub_; ++j) {
      const std::size_t base = kFixed + 5 * j;
      const TwoCptParams<double> sp = subject_params<double>(theta, j);
      const double lb = lambda1_twocpt(sp.cl, sp.q, sp.vc, sp.vp);
      if (!(theta[base + 4] > lb)) {
        throw ValidationError(pnames_[base + 4] + " must exceed lambda1 = " +
                              format_double(lb) + "; got " + format_double(theta[base + 4]));
      }
    }
  }

  static double draw_above(Rng& rng, double mu, double sd, double lb) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double v = rng.lognormal(mu, sd);
      if (v > lb) return v;
    }
    return 1.5 * lb;
  }

  static constexpr std::size_t kFixed = 11;
  std::vector<LognormalPrior> priors_;
  double omega_mu_ = 0.25, omega_sd_ = 0.1, sigma_scale_ = 1.0;
  std::size_t nsub_ = 0;
  std::vector<double> sw075_, sw1_;
  std::vector<std::vector<std::size_t>> subj_obs_;
};

// ---------------------------------------------------------------------------
// Friberg-Karlsson neutropenia model on top of two-compartment kinetics.
// States: gut, central, peripheral amounts plus five cell-lineage states
// (proliferating pool, three transit compartments, circulating cells) stored
// as differences from the Circ0 baseline so initial conditions are zero.
// Drug effect EDrug = min(alpha * conc, 1) shuts down proliferation; the
// feedback term (Circ0/Circ)^gamma speeds recovery when counts are low.

template <typename T>
Matrix<T> solve_fk(std::span<const EventRecord> recs, std::span<const T> th9,
                   const OdeControls& ctrl, bool full_numeric) {
  const T cl = th9[0], q = th9[1], v1 = th9[2], v2 = th9[3], ka = th9[4];
  const T mtt = th9[5], circ0 = th9[6], alpha = th9[7], gamma = th9[8];
  const T ktr = 4.0 / mtt;
  const DoseControls dc = DoseControls::defaults(8);

  if (full_numeric) {
    const T k10 = cl / v1, k12 = q / v1, k21 = q / v2;
    auto rhs = [=](double, const std::vector<T>& y, std::vector<T>& dy) {
      dy[0] = -ka * y[0];
      dy[1] = ka * y[0] - (k10 + k12) * y[1] + k21 * y[2];
      dy[2] = k12 * y[1] - k21 * y[2];
      const T conc = y[1] / v1;
      const T edrug = fmin(alpha * conc, T(1.0));
      const T prol = y[3] + circ0;
      const T tr1 = y[4] + circ0, tr2 = y[5] + circ0, tr3 = y[6] + circ0;
      const T circ = fmax(T(kCircFloor), y[7] + circ0);
      dy[3] = ktr * prol * ((1.0 - edrug) * pow(circ0 / circ, gamma) - 1.0);
      dy[4] = ktr * (prol - tr1);
      dy[5] = ktr * (tr1 - tr2);
      dy[6] = ktr * (tr2 - tr3);
      dy[7] = ktr * (tr3 - circ);
    };
    return solve_numeric<T>(recs, 8, rhs, ctrl, dc);
  }

  const TwoCptParams<T> p{cl, q, v1, v2, ka};
  auto pd_rhs = [=](double, const std::vector<T>& y, const std::array<T, 3>& ypk,
                    std::vector<T>& dy) {
    const T conc = ypk[1] / v1;
    const T edrug = fmin(alpha * conc, T(1.0));
    const T prol = y[0] + circ0;
    const T tr1 = y[1] + circ0, tr2 = y[2] + circ0, tr3 = y[3] + circ0;
    const T circ = fmax(T(kCircFloor), y[4] + circ0);
    dy[0] = ktr * prol * ((1.0 - edrug) * pow(circ0 / circ, gamma) - 1.0);
    dy[1] = ktr * (prol - tr1);
    dy[2] = ktr * (tr1 - tr2);
    dy[3] = ktr * (tr2 - tr3);
    dy[4] = ktr * (tr3 - circ);
  };
  return solve_coupled_twocpt<T>(recs, p, 5, pd_rhs, ctrl, dc);
}

class FkModel final : public ModelBase<FkModel> {
 public:
  FkModel(const Dataset& raw, const ModelOptions& opts)
      : ode_(opts.ode), full_numeric_(opts.fk_full_numeric) {
    name_ = "fk_pkpd";
    ds_ = expand_addl(raw);
    require_single_subject(ds_, name_);
    require_obs_cmt(ds_, {2, 8}, name_);
    obs_ = build_obs_info(ds_, 2);
    check_positive_dv(ds_, obs_);
    pnames_ = {"CL", "Q", "V1", "V2", "ka", "MTT", "Circ0", "alpha", "gamma", "sigma",
               "sigmaNeut"};
    const FkPriorConfig& fk = opts.fk;
    priors_ = {{fk.cl, fk.cl_cv},       {fk.q, fk.q_cv},     {fk.v1, fk.v1_cv},
               {fk.v2, fk.v2_cv},       {fk.ka, fk.ka_cv},   {fk.mtt, fk.mtt_cv},
               {fk.circ0, fk.circ0_cv}, {fk.alpha, fk.alpha_cv}, {fk.gamma, fk.gamma_cv}};
    PriorOverrides ov(opts.priors);
    const char* keys[] = {"cl", "q", "v1", "v2", "ka", "mtt", "circ0", "alpha", "gamma"};
    for (std::size_t p = 0; p < priors_.size(); ++p) priors_[p] = ov.lognormal(keys[p], priors_[p]);
    sigma_scale_ = ov.scale("sigma", 1.0);
    sigma_neut_scale_ = ov.scale("sigma_neut", 1.0);
    ov.finish(name_);
    for (const LognormalPrior& p : priors_) {
      check_positive("fk prior median", p.median);
      check_positive("fk prior cv", p.sd);
    }
    n_conc_ = n_anc_ = 0;
    for (const ObsInfo& o : obs_) (o.concentration ? n_conc_ : n_anc_) += 1;
    n_ll_ = count_in_likelihood(obs_);
    append_indexed(gqnames_, "log_lik", n_ll_);
    append_indexed(gqnames_, "cObsPred", n_conc_);
    append_indexed(gqnames_, "neutObsPred", n_anc_);
  }

  template <typename T>
  void constrain_impl(std::span<const T> z, std::vector<T>& theta, T& logjac) const {
    theta.resize(dim());
    for (std::size_t i = 0; i < 4; ++i) {
      theta[i] = exp(z[i]);
      logjac += z[i];
    }
    theta[4] = lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]) + exp(z[4]);
    logjac += z[4];
    for (std::size_t i = 5; i < dim(); ++i) {
      theta[i] = exp(z[i]);
      logjac += z[i];
    }
  }

  template <typename T>
  T lj(std::span<const T> z, LogJointParts* parts) const {
    return lj_guard<T>(
        [&](T& lprior, T& llik, T& logjac) {
          std::vector<T> theta;
          constrain_impl<T>(z, theta, logjac);
          for (std::size_t i = 0; i < priors_.size(); ++i) {
            lprior += lognormal_lpdf(theta[i], std::log(priors_[i].median), priors_[i].sd);
          }
          const T sigma = theta[9], sigma_neut = theta[10];
          lprior += half_normal_lpdf(sigma, sigma_scale_);
          lprior += half_normal_lpdf(sigma_neut, sigma_neut_scale_);

          const T v1 = theta[2], circ0 = theta[6];
          const Matrix<T> sol =
              solve_fk<T>(std::span<const EventRecord>(ds_.records),
                          std::span<const T>(theta.data(), 9), ode_, full_numeric_);
          for (const ObsInfo& o : obs_) {
            if (!o.in_likelihood) continue;
            const double dv = ds_.records[o.record_index].dv;
            if (o.concentration) {
              const T chat = sol(1, o.record_index) / v1;
              llik += lognormal_lpdf(dv, log(chat), sigma);
            } else {
              const T ahat = sol(7, o.record_index) + circ0;
              llik += lognormal_lpdf(dv, log(ahat), sigma_neut);
            }
          }
        },
        parts);
  }

  std::vector<double> unconstrain(std::span<const double> theta) const override {
    validate_constrained(theta);
    std::vector<double> z(dim());
    for (std::size_t i = 0; i < 4; ++i) z[i] = std::log(theta[i]);
    z[4] = std::log(theta[4] - lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]));
    for (std::size_t i = 5; i < dim(); ++i) z[i] = std::log(theta[i]);
    return z;
  }

  void validate_constrained(std::span<const double> theta) const override {
    validate_params(theta, false);
  }

  std::vector<double> generated_quantities(std::span<const double> theta,
                                           Rng& rng) const override {
    validate_constrained(theta);
    const double v1 = theta[2], circ0 = theta[6], sigma = theta[9], sigma_neut = theta[10];
    const Matrix<double> sol =
        solve_fk<double>(std::span<const EventRecord>(ds_.records),
                         std::span<const double>(theta.data(), 9), ode_, full_numeric_);
    std::vector<double> out;
    out.reserve(gqnames_.size());
    for (const ObsInfo& o : obs_) {
      if (!o.in_likelihood) continue;
      const double dv = ds_.records[o.record_index].dv;
      if (o.concentration) {
        out.push_back(lognormal_lpdf(dv, std::log(sol(1, o.record_index) / v1), sigma));
      } else {
        out.push_back(lognormal_lpdf(dv, std::log(sol(7, o.record_index) + circ0), sigma_neut));
      }
    }
    for (const ObsInfo& o : obs_) {
      if (!o.concentration) continue;
      out.push_back(replicate_lognormal(sol(1, o.record_index) / v1, sigma, rng));
    }
    for (const ObsInfo& o : obs_) {
      if (o.concentration) continue;
      out.push_back(replicate_lognormal(sol(7, o.record_index) + circ0, sigma_neut, rng));
    }
    return out;
  }

  std::vector<double> simulate_dv(std::span<const double> theta, Rng& rng) const override {
    validate_params(theta, true);
    const double v1 = theta[2], circ0 = theta[6], sigma = theta[9], sigma_neut = theta[10];
    const Matrix<double> sol =
        solve_fk<double>(std::span<const EventRecord>(ds_.records),
                         std::span<const double>(theta.data(), 9), ode_, full_numeric_);
    std::vector<double> out;
    out.reserve(obs_.size());
    for (const ObsInfo& o : obs_) {
      if (o.concentration) {
        out.push_back(replicate_lognormal(sol(1, o.record_index) / v1, sigma, rng));
      } else {
        out.push_back(replicate_lognormal(sol(7, o.record_index) + circ0, sigma_neut, rng));
      }
    }
    return out;
  }

  std::vector<double> draw_init(Rng& rng) const override {
    std::vector<double> theta(dim());
    for (std::size_t i = 0; i < 4; ++i) {
      theta[i] = rng.lognormal(std::log(priors_[i].median), priors_[i].sd);
    }
    const double lb = lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]);
    theta[4] = [&] {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double v = rng.lognormal(std::log(priors_[4].median), priors_[4].sd);
        if (v > lb) return v;
      }
      return 1.5 * lb;
    }();
    for (std::size_t i = 5; i < 9; ++i) {
      theta[i] = rng.lognormal(std::log(priors_[i].median), priors_[i].sd);
    }
    theta[9] = sigma_scale_ * std::fabs(rng.normal());
    theta[10] = sigma_neut_scale_ * std::fabs(rng.normal());
    return unconstrain(theta);
  }

 private:
  void validate_params(std::span<const double> theta, bool allow_zero_sigma) const {
    check_len(theta.size(), "parameter vector");
    for (std::size_t i = 0; i < 9; ++i) check_positive(pnames_[i], theta[i]);
    check_sigma(pnames_[9], theta[9], allow_zero_sigma);
    check_sigma(pnames_[10], theta[10], allow_zero_sigma);
    const double lb = lambda1_twocpt(theta[0], theta[1], theta[2], theta[3]);
    if (!(theta[4] > lb)) {
      throw ValidationError("ka must exceed lambda1 = " + format_double(lb) + "; got " +
                            format_double(theta[4]));
    }
  }

  OdeControls ode_;
  bool full_numeric_;
  std::vector<LognormalPrior> priors_;
  double sigma_scale_ = 1.0, sigma_neut_scale_ = 1.0;
  std::size_t n_conc_ = 0, n_anc_ = 0;
};

}  // namespace

std::vector<std::string> builtin_model_names() {
  return {"twocpt", "onecpt", "twocpt_pop", "fk_pkpd"};
}

bool is_builtin_model(const std::string& name) {
  for (const std::string& n : builtin_model_names()) {
    if (n == name) return true;
  }
  return false;
}

std::unique_ptr<Model> make_model(const std::string& name, const Dataset& data,
                                  const ModelOptions& opts) {
  if (name == "twocpt") return std::make_unique<LinearModel>(data, true, opts);
  if (name == "onecpt") return std::make_unique<LinearModel>(data, false, opts);
  if (name == "twocpt_pop") return std::make_unique<PopModel>(data, opts);
  if (name == "fk_pkpd") return std::make_unique<FkModel>(data, opts);
  std::string list;
  for (const std::string& n : builtin_model_names()) list += (list.empty() ? "" : ", ") + n;
  throw ValidationError("unknown model '" + name + "'; built-in models: " + list);
}

Matrix<double> fk_solve(std::span<const EventRecord> records, std::span<const double> theta9,
                        const OdeControls& ctrl, bool full_numeric) {
  if (theta9.size() != 9) {
    throw ValidationError("fk_solve expects 9 parameters (CL, Q, V1, V2, ka, MTT, Circ0, "
                          "alpha, gamma); got " +
                          std::to_string(theta9.size()));
  }
  const char* names[] = {"CL", "Q", "V1", "V2", "ka", "MTT", "Circ0"};
  for (std::size_t i = 0; i < 7; ++i) check_positive(names[i], theta9[i]);
  for (std::size_t i = 7; i < 9; ++i) {
    if (!(theta9[i] >= 0.0) || !std::isfinite(theta9[i])) {
      throw ValidationError(std::string(i == 7 ? "alpha" : "gamma") +
                            " must be non-negative; got " + format_double(theta9[i]));
    }
  }
  return solve_fk<double>(records, theta9, ctrl, full_numeric);
}

}  // namespace pmx

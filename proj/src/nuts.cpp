#include "pmx/nuts.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <string>
#include <thread>
#include <utility>

#include "pmx/models.hpp"

namespace pmx {

namespace {

// Divergence threshold: the transition is divergent when the energy error
// relative to the slice exceeds this.
constexpr double kDeltaMax = 1000.0;

// Dual-averaging step-size adaptation (Nesterov primal-dual averaging applied
// to log eps), driven toward the target acceptance statistic delta.
struct DualAverager {
  double delta = 0.8;
  double gamma = 0.05;
  double t0 = 10.0;
  double kappa = 0.75;

  double mu = 0.0;
  double log_eps_bar = 0.0;
  double h_bar = 0.0;
  int m = 0;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    log_eps_bar = 0.0;
    h_bar = 0.0;
    m = 0;
  }

  // One update with the latest acceptance statistic; returns the step size to
  // use for the next transition.
  double update(double alpha) {
    ++m;
    const double w = 1.0 / (m + t0);
    h_bar = (1.0 - w) * h_bar + w * (delta - alpha);
    const double log_eps = mu - std::sqrt(static_cast<double>(m)) / gamma * h_bar;
    const double eta = std::pow(static_cast<double>(m), -kappa);
    log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar;
    return std::exp(log_eps);
  }

  double averaged() const { return std::exp(log_eps_bar); }
};

// Streaming mean/variance per coordinate.
struct Welford {
  std::vector<double> mean, m2;
  long long n = 0;

  void reset(std::size_t d) {
    mean.assign(d, 0.0);
    m2.assign(d, 0.0);
    n = 0;
  }

  void add(std::span<const double> x) {
    ++n;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / static_cast<double>(n);
      m2[i] += d * (x[i] - mean[i]);
    }
  }

  // Sample variance shrunk toward the unit metric with weight 5 / (n + 5),
  // which keeps the estimate positive and conservative for short windows.
  std::vector<double> regularized_var() const {
    std::vector<double> v(mean.size(), 1.0);
    if (n > 1) {
      const double nd = static_cast<double>(n);
      const double w = nd / (nd + 5.0);
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = w * (m2[i] / (nd - 1.0)) + (1.0 - w);
    }
    return v;
  }
};

// Warmup layout: a fast initial buffer (step size only), a sequence of
// doubling covariance windows, and a fast terminal buffer. window_ends holds
// the iteration count (1-based) at which each window closes.
struct AdaptSchedule {
  int init_buf = 0;
  int term_start = 0;  // first iteration (0-based) of the terminal buffer
  std::vector<int> window_ends;
};

AdaptSchedule make_schedule(int warmup) {
  AdaptSchedule s;
  if (warmup <= 0) return s;
  const int init_buf = std::max(1, static_cast<int>(std::lround(0.075 * warmup)));
  const int term_buf = std::max(1, static_cast<int>(std::lround(0.10 * warmup)));
  const int base = std::max(1, static_cast<int>(std::lround(0.025 * warmup)));
  if (init_buf + base + term_buf > warmup) {
    // Too short for windowed estimation: adapt the step size only.
    s.init_buf = warmup;
    s.term_start = warmup;
    return s;
  }
  s.init_buf = init_buf;
  s.term_start = warmup - term_buf;
  int start = init_buf;
  int width = base;
  while (start + width <= s.term_start) {
    int end = start + width;
    // Absorb a remainder too small for the next doubled window.
    if (end + 2 * width > s.term_start) end = s.term_start;
    s.window_ends.push_back(end);
    start = end;
    width *= 2;
  }
  return s;
}

class ChainWorker {
 public:
  ChainWorker(const Target& target, const SamplerConfig& cfg, int chain)
      : t_(target),
        cfg_(cfg),
        chain_(chain),
        rng_(cfg.seed, static_cast<std::uint64_t>(chain)),
        dim_(target.dim),
        inv_metric_(target.dim, 1.0) {}

  ChainResult run() {
    ChainResult res;
    res.n_warmup = cfg_.warmup;
    const int total = cfg_.warmup + cfg_.sampling;
    res.draws = Matrix<double>(static_cast<std::size_t>(total), dim_);
    res.lp.resize(total);
    res.accept_stat.resize(total);
    res.treedepth.resize(total);
    res.divergent.resize(total);
    res.energy.resize(total);

    std::vector<double> q, grad;
    double lp = 0.0;
    initialize(q, lp, grad);

    double eps = find_step_size(q, lp, grad);
    DualAverager da;
    da.delta = cfg_.target_accept;
    da.restart(eps);

    const AdaptSchedule sch = make_schedule(cfg_.warmup);
    Welford wf;
    wf.reset(dim_);
    std::size_t win = 0;
    for (int m = 0; m < cfg_.warmup; ++m) {
      const Transition tr = transition(q, lp, grad, eps);
      record(res, m, q, lp, tr);
      eps = da.update(tr.accept);
      if (m >= sch.init_buf && m < sch.term_start) wf.add(q);
      if (win < sch.window_ends.size() && m + 1 == sch.window_ends[win]) {
        inv_metric_ = wf.regularized_var();
        wf.reset(dim_);
        ++win;
        // Re-establish a reasonable step size under the new metric, then
        // restart dual averaging around it.
        eps = find_step_size(q, lp, grad);
        da.restart(eps);
      }
    }
    if (cfg_.warmup > 0) eps = da.averaged();

    res.step_size = eps;
    res.inv_metric = inv_metric_;
    for (int m = 0; m < cfg_.sampling; ++m) {
      const Transition tr = transition(q, lp, grad, eps);
      record(res, cfg_.warmup + m, q, lp, tr);
      if (tr.divergent) ++res.divergences_sampling;
      if (tr.max_depth_hit) ++res.max_depth_hits_sampling;
    }
    return res;
  }

 private:
  struct Transition {
    double accept = 0.0;
    int depth = 0;
    bool divergent = false;
    bool max_depth_hit = false;
    double energy = 0.0;
  };

  // Subtree summary: outermost states in both directions (with cached
  // gradients so extension never re-evaluates), the candidate draw, the
  // slice-acceptable leaf count, and termination/acceptance bookkeeping.
  struct Tree {
    std::vector<double> qm, pm, gm;
    std::vector<double> qp, pp, gp;
    std::vector<double> q_sel, g_sel;
    double lp_sel = 0.0;
    double kin_sel = 0.0;
    long n = 0;
    bool keep_going = false;
    bool divergent = false;
    double alpha = 0.0;
    long n_alpha = 0;
  };

  bool eval(std::span<const double> q, double& lp, std::vector<double>& grad) {
    GradResult r = t_.log_joint_grad(q);
    lp = r.value;
    grad = std::move(r.grad);
    return r.value_finite && r.grad_finite;
  }

  double kinetic(const std::vector<double>& p) const {
    double k = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) k += p[i] * p[i] * inv_metric_[i];
    return 0.5 * k;
  }

  void sample_momentum(std::vector<double>& p) {
    p.resize(dim_);
    for (std::size_t i = 0; i < dim_; ++i) p[i] = rng_.normal() / std::sqrt(inv_metric_[i]);
  }

  // U-turn termination: the span of the trajectory must keep a non-negative
  // projection onto the velocity at both ends (reduces to the plain
  // momentum dot product for a unit metric).
  bool no_uturn(const Tree& t) const {
    double vm = 0.0, vp = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double dq = t.qp[i] - t.qm[i];
      vm += dq * inv_metric_[i] * t.pm[i];
      vp += dq * inv_metric_[i] * t.pp[i];
    }
    return vm >= 0.0 && vp >= 0.0;
  }

  void initialize(std::vector<double>& q, double& lp, std::vector<double>& grad) {
    const std::string tag = "chain " + std::to_string(chain_ + 1) + ": ";
    if (cfg_.init_mode == InitMode::kValue) {
      q = cfg_.init_value;
      if (!eval(q, lp, grad))
        throw NumericalError(tag +
                             "non-finite log density or gradient at the supplied initial value");
      return;
    }
    const bool use_prior = cfg_.init_mode == InitMode::kPrior && t_.draw_init;
    for (int attempt = 0; attempt < 100; ++attempt) {
      try {
        if (use_prior) {
          q = t_.draw_init(rng_);
        } else {
          q.resize(dim_);
          for (std::size_t i = 0; i < dim_; ++i)
            q[i] = rng_.uniform(-cfg_.init_radius, cfg_.init_radius);
        }
      } catch (const NumericalError&) {
        continue;  // a failed prior draw counts as a failed attempt
      } catch (const ValidationError&) {
        continue;  // e.g. a prior draw landing exactly on a bound
      }
      if (q.size() != dim_)
        throw ValidationError(tag + "draw_init returned " + std::to_string(q.size()) +
                              " values, expected " + std::to_string(dim_));
      if (eval(q, lp, grad)) return;
    }
    throw NumericalError(tag +
                         "initialization failed: no finite log density and gradient "
                         "in 100 attempts");
  }

  // Doubling/halving search for a step size with acceptance ratio near 0.5,
  // evaluated on single leapfrog steps with fresh momenta.
  double find_step_size(const std::vector<double>& q0, double lp0,
                        const std::vector<double>& grad0) {
    double eps = 1.0;
    int dir = 0;
    for (int iter = 0; iter < 100; ++iter) {
      std::vector<double> q = q0, grad = grad0, p;
      double lp = lp0;
      sample_momentum(p);
      const double h0 = lp0 - kinetic(p);
      double log_ratio = -kInf;
      if (leapfrog_step(t_, q, p, grad, lp, eps, inv_metric_))
        log_ratio = (lp - kinetic(p)) - h0;
      const bool accepting = log_ratio > std::log(0.5);
      if (iter == 0) {
        dir = accepting ? 1 : -1;
      } else if (accepting != (dir == 1)) {
        return eps;  // crossed the 0.5 threshold from the initial side
      }
      eps = dir == 1 ? 2.0 * eps : 0.5 * eps;
      if (!(eps > 1e-17) || !(eps < 1e17))
        throw NumericalError("chain " + std::to_string(chain_ + 1) +
                             ": step size search failed to bracket an acceptance "
                             "ratio of 0.5");
    }
    return eps;
  }

  Tree leaf(std::vector<double> q, std::vector<double> p, std::vector<double> grad, double lp,
            double log_u, int dir, double eps, double h0) {
    Tree t;
    const bool ok = leapfrog_step(t_, q, p, grad, lp, dir * eps, inv_metric_);
    const double kin = ok ? kinetic(p) : 0.0;
    const double joint = ok ? lp - kin : -kInf;
    t.n = log_u <= joint ? 1 : 0;
    t.divergent = !(log_u - joint < kDeltaMax);
    t.keep_going = !t.divergent;
    t.alpha = std::isfinite(joint) ? std::min(1.0, std::exp(joint - h0)) : 0.0;
    t.n_alpha = 1;
    t.lp_sel = lp;
    t.kin_sel = kin;
    t.qm = q;
    t.pm = p;
    t.gm = grad;
    t.qp = std::move(q);
    t.pp = std::move(p);
    t.gp = std::move(grad);
    t.q_sel = t.qp;
    t.g_sel = t.gp;
    return t;
  }

  Tree build_tree(const std::vector<double>& q, const std::vector<double>& p,
                  const std::vector<double>& grad, double lp, double log_u, int dir, int depth,
                  double eps, double h0) {
    if (depth == 0) return leaf(q, p, grad, lp, log_u, dir, eps, h0);
    Tree inner = build_tree(q, p, grad, lp, log_u, dir, depth - 1, eps, h0);
    if (!inner.keep_going) return inner;
    Tree outer = dir == 1 ? build_tree(inner.qp, inner.pp, inner.gp, inner.lp_sel, log_u, dir,
                                       depth - 1, eps, h0)
                          : build_tree(inner.qm, inner.pm, inner.gm, inner.lp_sel, log_u, dir,
                                       depth - 1, eps, h0);
    // lp passed above is only a seed for the recursion's leaf; the leaf
    // re-evaluates after its leapfrog step, so any value works. Using the
    // subtree's selected lp keeps the signature uniform.
    Tree t;
    if (dir == 1) {
      t.qm = std::move(inner.qm);
      t.pm = std::move(inner.pm);
      t.gm = std::move(inner.gm);
      t.qp = std::move(outer.qp);
      t.pp = std::move(outer.pp);
      t.gp = std::move(outer.gp);
    } else {
      t.qm = std::move(outer.qm);
      t.pm = std::move(outer.pm);
      t.gm = std::move(outer.gm);
      t.qp = std::move(inner.qp);
      t.pp = std::move(inner.pp);
      t.gp = std::move(inner.gp);
    }
    const long n_total = inner.n + outer.n;
    const bool take_outer =
        outer.n > 0 && rng_.uniform() * static_cast<double>(n_total) < static_cast<double>(outer.n);
    const Tree& sel = take_outer ? outer : inner;
    t.q_sel = sel.q_sel;
    t.g_sel = sel.g_sel;
    t.lp_sel = sel.lp_sel;
    t.kin_sel = sel.kin_sel;
    t.n = n_total;
    t.divergent = inner.divergent || outer.divergent;
    t.alpha = inner.alpha + outer.alpha;
    t.n_alpha = inner.n_alpha + outer.n_alpha;
    t.keep_going = outer.keep_going && no_uturn(t);
    return t;
  }

  Transition transition(std::vector<double>& q, double& lp, std::vector<double>& grad,
                        double eps) {
    std::vector<double> p0;
    sample_momentum(p0);
    const double kin0 = kinetic(p0);
    const double h0 = lp - kin0;
    const double log_u = h0 - rng_.exponential();

    Tree t;
    t.qm = q;
    t.pm = p0;
    t.gm = grad;
    t.qp = q;
    t.pp = std::move(p0);
    t.gp = grad;
    t.q_sel = q;
    t.g_sel = grad;
    t.lp_sel = lp;
    t.kin_sel = kin0;
    t.n = 1;
    t.keep_going = true;

    Transition tr;
    double alpha_sum = 0.0;
    long n_alpha = 0;
    int depth = 0;
    while (t.keep_going && depth < cfg_.max_treedepth) {
      const int dir = rng_.uniform() < 0.5 ? -1 : 1;
      const Tree sub = dir == 1
                           ? build_tree(t.qp, t.pp, t.gp, t.lp_sel, log_u, dir, depth, eps, h0)
                           : build_tree(t.qm, t.pm, t.gm, t.lp_sel, log_u, dir, depth, eps, h0);
      alpha_sum += sub.alpha;
      n_alpha += sub.n_alpha;
      tr.divergent = tr.divergent || sub.divergent;
      if (dir == 1) {
        t.qp = sub.qp;
        t.pp = sub.pp;
        t.gp = sub.gp;
      } else {
        t.qm = sub.qm;
        t.pm = sub.pm;
        t.gm = sub.gm;
      }
      if (sub.keep_going && sub.n > 0 &&
          rng_.uniform() * static_cast<double>(t.n) < static_cast<double>(sub.n)) {
        t.q_sel = sub.q_sel;
        t.g_sel = sub.g_sel;
        t.lp_sel = sub.lp_sel;
        t.kin_sel = sub.kin_sel;
      }
      t.n += sub.n;
      t.keep_going = sub.keep_going && no_uturn(t);
      ++depth;
    }
    tr.max_depth_hit = t.keep_going && depth == cfg_.max_treedepth;
    tr.depth = depth;
    tr.accept = n_alpha > 0 ? alpha_sum / static_cast<double>(n_alpha) : 0.0;
    tr.energy = -t.lp_sel + t.kin_sel;

    q = std::move(t.q_sel);
    grad = std::move(t.g_sel);
    lp = t.lp_sel;
    return tr;
  }

  void record(ChainResult& res, int row, const std::vector<double>& q, double lp,
              const Transition& tr) {
    for (std::size_t i = 0; i < dim_; ++i) res.draws(static_cast<std::size_t>(row), i) = q[i];
    res.lp[row] = lp;
    res.accept_stat[row] = tr.accept;
    res.treedepth[row] = tr.depth;
    res.divergent[row] = tr.divergent ? 1 : 0;
    res.energy[row] = tr.energy;
  }

  const Target& t_;
  const SamplerConfig& cfg_;
  int chain_;
  Rng rng_;
  std::size_t dim_;
  std::vector<double> inv_metric_;
};

void validate_config(const Target& target, const SamplerConfig& cfg) {
  if (target.dim == 0 || !target.log_joint_grad)
    throw ValidationError("sampler target must have dim > 0 and a log density gradient");
  if (cfg.chains < 1) throw ValidationError("chains must be >= 1");
  if (cfg.warmup < 0 || cfg.sampling < 0)
    throw ValidationError("warmup and sampling iteration counts must be non-negative");
  if (cfg.warmup + cfg.sampling == 0)
    throw ValidationError("warmup + sampling must be positive");
  if (!(cfg.target_accept > 0.0 && cfg.target_accept < 1.0))
    throw ValidationError("target_accept must lie strictly between 0 and 1");
  if (cfg.max_treedepth < 1 || cfg.max_treedepth > 20)
    throw ValidationError("max_treedepth must lie in [1, 20]");
  if (cfg.init_mode == InitMode::kValue && cfg.init_value.size() != target.dim)
    throw ValidationError("init value has " + std::to_string(cfg.init_value.size()) +
                          " entries, expected " + std::to_string(target.dim));
  if (!(cfg.init_radius > 0.0)) throw ValidationError("init_radius must be positive");
}

}  // namespace

bool leapfrog_step(const Target& target, std::vector<double>& q, std::vector<double>& p,
                   std::vector<double>& grad, double& lp, double eps,
                   std::span<const double> inv_metric) {
  const std::size_t d = target.dim;
  for (std::size_t i = 0; i < d; ++i) p[i] += 0.5 * eps * grad[i];
  for (std::size_t i = 0; i < d; ++i) q[i] += eps * inv_metric[i] * p[i];
  GradResult r = target.log_joint_grad(q);
  lp = r.value;
  grad = std::move(r.grad);
  if (!r.value_finite || !r.grad_finite) return false;
  for (std::size_t i = 0; i < d; ++i) p[i] += 0.5 * eps * grad[i];
  return true;
}

std::vector<ChainResult> nuts_sample(const Target& target, const SamplerConfig& cfg) {
  validate_config(target, cfg);
  std::vector<ChainResult> out(static_cast<std::size_t>(cfg.chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.chains));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(cfg.chains));
  for (int c = 0; c < cfg.chains; ++c) {
    threads.emplace_back([&, c]() {
      try {
        ChainWorker worker(target, cfg, c);
        out[static_cast<std::size_t>(c)] = worker.run();
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

Target model_target(const Model& m) {
  Target t;
  t.dim = m.dim();
  t.log_joint_grad = [&m](std::span<const double> z) { return m.log_joint_grad(z); };
  t.draw_init = [&m](Rng& rng) { return m.draw_init(rng); };
  return t;
}

}  // namespace pmx

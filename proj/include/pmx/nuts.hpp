#pragma once

// No-U-Turn sampler (slice-termination variant with multinomial-free doubling)
// with dual-averaging step-size adaptation and windowed diagonal metric
// estimation. The sampler works on an arbitrary differentiable log density
// exposed through Target, so it is independent of the model layer; adapters
// for Model live in model_target().

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/gradient.hpp"
#include "pmx/rng.hpp"

namespace pmx {

class Model;

// A differentiable unnormalized log density. log_joint_grad must be safe to
// call concurrently from several threads (it receives distinct argument
// buffers). draw_init may be empty; initialization then falls back to
// uniform(-init_radius, init_radius) in the unconstrained space.
struct Target {
  std::size_t dim = 0;
  std::function<GradResult(std::span<const double>)> log_joint_grad;
  std::function<std::vector<double>(Rng&)> draw_init;
};

// Adapter for the model layer. The returned Target holds a reference to the
// model, which must outlive it.
Target model_target(const Model& m);

enum class InitMode {
  kPrior,    // draw_init (falls back to uniform when absent)
  kUniform,  // uniform(-init_radius, init_radius) per coordinate
  kValue,    // fixed unconstrained point from init_value
};

struct SamplerConfig {
  int chains = 4;
  int warmup = 1000;
  int sampling = 1000;
  std::uint64_t seed = 1;
  double target_accept = 0.8;  // dual-averaging target, in (0, 1)
  int max_treedepth = 10;
  InitMode init_mode = InitMode::kPrior;
  std::vector<double> init_value;  // used by InitMode::kValue; size must equal dim
  double init_radius = 2.0;
};

// Per-chain output. Warmup draws are stored ahead of sampling draws so that
// the warmup trajectory can be inspected (and retained when sampling == 0).
struct ChainResult {
  int n_warmup = 0;
  Matrix<double> draws;             // (n_warmup + n_sampling) x dim, unconstrained
  std::vector<double> lp;           // log joint (including Jacobian) at each draw
  std::vector<double> accept_stat;  // mean leapfrog acceptance statistic
  std::vector<int> treedepth;       // doublings performed in the transition
  std::vector<std::uint8_t> divergent;
  std::vector<double> energy;       // -lp + kinetic energy at the accepted point
  double step_size = 0.0;           // step size used for the sampling phase
  std::vector<double> inv_metric;   // diagonal inverse mass matrix
  int divergences_sampling = 0;     // divergent transitions after warmup
  int max_depth_hits_sampling = 0;  // sampling transitions that hit max_treedepth
};

// One leapfrog step of the Hamiltonian -lp(q) + 0.5 * p' diag(inv_metric) p:
// half momentum kick, full position drift q += eps * inv_metric .* p, half
// kick. q, p, grad, and lp are updated in place; grad must hold the gradient
// at the incoming q. Returns false when the log density or gradient at the
// new position is non-finite (the caller treats that as a divergence).
bool leapfrog_step(const Target& target, std::vector<double>& q, std::vector<double>& p,
                   std::vector<double>& grad, double& lp, double eps,
                   std::span<const double> inv_metric);

// Runs cfg.chains independent chains (concurrently, one thread per chain) and
// returns their results in chain order. Deterministic for a fixed (target,
// cfg): chain c uses the dedicated stream Rng(cfg.seed, c) and no state is
// shared between chains. Throws ValidationError for bad configuration and
// NumericalError when a chain cannot be initialized within 100 attempts.
std::vector<ChainResult> nuts_sample(const Target& target, const SamplerConfig& cfg);

}  // namespace pmx

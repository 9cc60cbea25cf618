// Python bindings for the pmxbayes core: event-schedule solvers, the NUTS
// fit/simulate pipeline, and the MCMC/LOO statistics. Datasets are accepted
// either as a CSV path or as a dict of NONMEM-style columns.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/events.hpp"
#include "pmx/mcstats.hpp"
#include "pmx/models.hpp"
#include "pmx/nuts.hpp"
#include "pmx/rng.hpp"
#include "pmx/schedule_solver.hpp"

namespace py = pybind11;
using namespace pmx;

namespace {

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// A dataset is either a CSV path or a dict of equal-length columns keyed by
// the NONMEM names (case-insensitive); unknown keys become covariates.
Dataset dataset_from_py(const py::object& data) {
  if (py::isinstance<py::str>(data)) {
    return read_dataset_csv(data.cast<std::string>());
  }
  if (!py::isinstance<py::dict>(data)) {
    throw ValidationError("data must be a CSV path or a dict of columns");
  }
  std::map<std::string, std::vector<double>> cols;  // upper-cased standard keys
  std::map<std::string, std::vector<double>> covariates;
  std::size_t n = 0;
  bool have_any = false;
  static const std::vector<std::string> kStandard{"ID",  "TIME", "AMT",  "RATE", "II",
                                                  "EVID", "CMT",  "ADDL", "SS",   "DV",
                                                  "MDV"};
  for (const auto& item : data.cast<py::dict>()) {
    const std::string key = item.first.cast<std::string>();
    std::vector<double> col;
    for (const auto& v : item.second.cast<py::iterable>()) {
      col.push_back(v.is_none() ? kNaN : v.cast<double>());
    }
    if (!have_any) {
      n = col.size();
      have_any = true;
    } else if (col.size() != n) {
      throw ValidationError("column " + key + " has length " + std::to_string(col.size()) +
                            ", expected " + std::to_string(n));
    }
    const std::string up = upper(key);
    if (std::find(kStandard.begin(), kStandard.end(), up) != kStandard.end()) {
      cols[up] = std::move(col);
    } else {
      covariates[key] = std::move(col);
    }
  }
  const auto get = [&](const std::string& key, double def) {
    const auto it = cols.find(key);
    return [it, found = it != cols.end(), def](std::size_t i) {
      return found ? it->second[i] : def;
    };
  };
  if (!cols.count("TIME")) throw ValidationError("data needs a TIME column");
  const auto id = get("ID", 1), time = get("TIME", 0), amt = get("AMT", 0), rate = get("RATE", 0),
             ii = get("II", 0), evid = get("EVID", 0), cmt = get("CMT", 1), addl = get("ADDL", 0),
             ss = get("SS", 0), dv = get("DV", kNaN), mdv = get("MDV", 0);
  std::vector<EventRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    EventRecord& r = recs[i];
    r.subject = static_cast<int>(id(i));
    r.time = time(i);
    r.amt = amt(i);
    r.rate = rate(i);
    r.ii = ii(i);
    r.evid = static_cast<int>(evid(i));
    r.cmt = static_cast<int>(cmt(i));
    r.addl = static_cast<int>(addl(i));
    r.ss = static_cast<int>(ss(i));
    r.dv = mdv(i) != 0.0 ? kNaN : dv(i);
    r.origin_row = i + 1;
  }
  return make_dataset(std::move(recs), std::move(covariates));
}

py::array_t<double> matrix_to_array(const Matrix<double>& m) {
  py::array_t<double> a({m.rows(), m.cols()});
  auto buf = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) buf(i, j) = m(i, j);
  return a;
}

// Amounts per record (rows) and compartment (columns) over the expanded
// single-subject schedule.
py::array_t<double> py_solve_twocpt(const py::object& data, double cl, double q, double vc,
                                    double vp, double ka) {
  const Dataset ds = expand_addl(dataset_from_py(data));
  if (ds.n_subjects() != 1) throw ValidationError("solve_twocpt expects a single subject");
  const TwoCptParams<double> p{cl, q, vc, vp, ka};
  const Matrix<double> sol =
      solve_linear_twocpt<double>(ds.records, p, DoseControls::defaults(3));
  Matrix<double> out(sol.cols(), sol.rows());
  for (std::size_t i = 0; i < sol.rows(); ++i)
    for (std::size_t j = 0; j < sol.cols(); ++j) out(j, i) = sol(i, j);
  return matrix_to_array(out);
}

py::array_t<double> py_solve_onecpt(const py::object& data, double cl, double v, double ka) {
  const Dataset ds = expand_addl(dataset_from_py(data));
  if (ds.n_subjects() != 1) throw ValidationError("solve_onecpt expects a single subject");
  const OneCptParams<double> p{cl, v, ka};
  const Matrix<double> sol =
      solve_linear_onecpt<double>(ds.records, p, DoseControls::defaults(2));
  Matrix<double> out(sol.cols(), sol.rows());
  for (std::size_t i = 0; i < sol.rows(); ++i)
    for (std::size_t j = 0; j < sol.cols(); ++j) out(j, i) = sol(i, j);
  return matrix_to_array(out);
}

py::array_t<double> py_fk_solve(const py::object& data, const std::map<std::string, double>& theta,
                                double rtol, double atol, int max_steps, bool full_numeric) {
  const Dataset ds = expand_addl(dataset_from_py(data));
  if (ds.n_subjects() != 1) throw ValidationError("solve_fk expects a single subject");
  static const char* kOrder[] = {"CL", "Q", "V1", "V2", "ka", "MTT", "Circ0", "alpha", "gamma"};
  std::vector<double> th;
  for (const char* k : kOrder) {
    const auto it = theta.find(k);
    if (it == theta.end()) throw ValidationError(std::string("solve_fk: missing parameter ") + k);
    th.push_back(it->second);
  }
  if (theta.size() != 9) throw ValidationError("solve_fk: expected exactly the 9 pkpd parameters");
  OdeControls ctrl;
  ctrl.rtol = rtol;
  ctrl.atol = atol;
  ctrl.max_num_step = max_steps;
  const Matrix<double> sol = fk_solve(ds.records, th, ctrl, full_numeric);
  Matrix<double> out(sol.cols(), sol.rows());
  for (std::size_t i = 0; i < sol.rows(); ++i)
    for (std::size_t j = 0; j < sol.cols(); ++j) out(j, i) = sol(i, j);
  return matrix_to_array(out);
}

ModelOptions options_from_py(const py::object& priors, double rtol, double atol, int max_steps,
                             bool fk_full_numeric) {
  ModelOptions mo;
  mo.ode.rtol = rtol;
  mo.ode.atol = atol;
  mo.ode.max_num_step = max_steps;
  mo.fk_full_numeric = fk_full_numeric;
  if (!priors.is_none()) mo.priors = priors.cast<std::map<std::string, double>>();
  return mo;
}

std::vector<double> theta_from_py(const Model& m, const py::dict& params) {
  std::map<std::string, double> kv;
  for (const auto& item : params) {
    kv[item.first.cast<std::string>()] = item.second.cast<double>();
  }
  std::vector<double> theta;
  for (const auto& n : m.param_names()) {
    const auto it = kv.find(n);
    if (it == kv.end()) throw ValidationError("missing value for parameter " + n);
    theta.push_back(it->second);
    kv.erase(it);
  }
  if (!kv.empty()) {
    throw ValidationError("unknown parameter " + kv.begin()->first + " for model " + m.name());
  }
  return theta;
}

py::dict py_simulate(const std::string& model, const py::object& data, const py::dict& params,
                     std::uint64_t seed, const py::object& priors, double rtol, double atol,
                     int max_steps, bool fk_full_numeric) {
  const Dataset ds = dataset_from_py(data);
  const auto m = make_model(model, ds, options_from_py(priors, rtol, atol, max_steps,
                                                       fk_full_numeric));
  const std::vector<double> theta = theta_from_py(*m, params);
  Rng rng(seed);
  const std::vector<double> dv = m->simulate_dv(theta, rng);

  const auto& obs = m->obs_info();
  py::array_t<double> time(obs.size()), dv_arr(obs.size());
  py::array_t<int> cmt(obs.size()), subject(obs.size());
  auto tb = time.mutable_unchecked<1>();
  auto db = dv_arr.mutable_unchecked<1>();
  auto cb = cmt.mutable_unchecked<1>();
  auto sb = subject.mutable_unchecked<1>();
  for (std::size_t k = 0; k < obs.size(); ++k) {
    tb(k) = obs[k].time;
    db(k) = dv[k];
    cb(k) = obs[k].cmt;
    sb(k) = m->data().records[obs[k].record_index].subject;
  }
  py::dict out;
  out["subject"] = subject;
  out["time"] = time;
  out["cmt"] = cmt;
  out["dv"] = dv_arr;
  return out;
}

py::dict py_fit(const std::string& model, const py::object& data, int chains, int warmup,
                int sampling, std::uint64_t seed, double target_accept, int max_treedepth,
                const py::object& init, const py::object& priors, double rtol, double atol,
                int max_steps, bool fk_full_numeric) {
  const Dataset ds = dataset_from_py(data);
  const auto m = make_model(model, ds, options_from_py(priors, rtol, atol, max_steps,
                                                       fk_full_numeric));

  SamplerConfig cfg;
  cfg.chains = chains;
  cfg.warmup = warmup;
  cfg.sampling = sampling;
  cfg.seed = seed;
  cfg.target_accept = target_accept;
  cfg.max_treedepth = max_treedepth;
  if (py::isinstance<py::str>(init)) {
    const std::string s = init.cast<std::string>();
    if (s == "prior") {
      cfg.init_mode = InitMode::kPrior;
    } else if (s == "uniform") {
      cfg.init_mode = InitMode::kUniform;
    } else {
      throw ValidationError("init must be 'prior', 'uniform' or a parameter dict");
    }
  } else if (py::isinstance<py::dict>(init)) {
    cfg.init_mode = InitMode::kValue;
    cfg.init_value = m->unconstrain(theta_from_py(*m, init.cast<py::dict>()));
  } else if (!init.is_none()) {
    throw ValidationError("init must be 'prior', 'uniform' or a parameter dict");
  }

  std::vector<ChainResult> results;
  {
    py::gil_scoped_release release;
    const Target target = model_target(*m);
    results = nuts_sample(target, cfg);
  }

  const std::size_t dim = m->dim();
  const std::size_t n_gq = m->gq_names().size();
  const std::size_t s = static_cast<std::size_t>(sampling);
  const std::size_t c_n = results.size();

  py::array_t<double> draws({c_n, s, dim});
  py::array_t<double> gq({c_n, s, n_gq});
  py::array_t<double> lp({c_n, s}), accept({c_n, s}), energy({c_n, s});
  py::array_t<int> treedepth({c_n, s});
  py::array_t<std::uint8_t> divergent({c_n, s});
  py::array_t<double> step_size(c_n), inv_metric({c_n, dim});

  auto d_b = draws.mutable_unchecked<3>();
  auto g_b = gq.mutable_unchecked<3>();
  auto lp_b = lp.mutable_unchecked<2>();
  auto a_b = accept.mutable_unchecked<2>();
  auto e_b = energy.mutable_unchecked<2>();
  auto t_b = treedepth.mutable_unchecked<2>();
  auto v_b = divergent.mutable_unchecked<2>();
  auto s_b = step_size.mutable_unchecked<1>();
  auto m_b = inv_metric.mutable_unchecked<2>();

  int divergences = 0, depth_hits = 0;
  std::vector<double> z(dim);
  for (std::size_t c = 0; c < c_n; ++c) {
    const ChainResult& r = results[c];
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t row = static_cast<std::size_t>(warmup) + i;
      for (std::size_t j = 0; j < dim; ++j) z[j] = r.draws(row, j);
      const std::vector<double> theta = m->constrain(z);
      for (std::size_t j = 0; j < dim; ++j) d_b(c, i, j) = theta[j];
      Rng gq_rng(seed, c, i + 1);
      const std::vector<double> gqv = m->generated_quantities(theta, gq_rng);
      for (std::size_t j = 0; j < n_gq; ++j) g_b(c, i, j) = gqv[j];
      lp_b(c, i) = r.lp[row];
      a_b(c, i) = r.accept_stat[row];
      e_b(c, i) = r.energy[row];
      t_b(c, i) = r.treedepth[row];
      v_b(c, i) = r.divergent[row];
    }
    s_b(c) = r.step_size;
    for (std::size_t j = 0; j < dim; ++j) m_b(c, j) = r.inv_metric[j];
    divergences += r.divergences_sampling;
    depth_hits += r.max_depth_hits_sampling;
  }

  py::dict out;
  out["params"] = m->param_names();
  out["gq_names"] = m->gq_names();
  out["draws"] = draws;
  out["gq"] = gq;
  out["lp"] = lp;
  out["accept_stat"] = accept;
  out["energy"] = energy;
  out["treedepth"] = treedepth;
  out["divergent"] = divergent;
  out["step_size"] = step_size;
  out["inv_metric"] = inv_metric;
  out["divergences"] = divergences;
  out["max_depth_hits"] = depth_hits;
  return out;
}

// (chains, iterations) -> VarChains
VarChains chains_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>&
                                x) {
  if (x.ndim() != 2) throw ValidationError("expected a (chains, iterations) array");
  auto b = x.unchecked<2>();
  VarChains vc(static_cast<std::size_t>(b.shape(0)));
  for (py::ssize_t c = 0; c < b.shape(0); ++c) {
    vc[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(b.shape(1)));
    for (py::ssize_t i = 0; i < b.shape(1); ++i) vc[c][i] = b(c, i);
  }
  return vc;
}

py::list py_summarize(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& draws,
    const std::vector<std::string>& names) {
  if (draws.ndim() != 3) throw ValidationError("expected a (chains, iterations, variables) array");
  auto b = draws.unchecked<3>();
  if (static_cast<std::size_t>(b.shape(2)) != names.size()) {
    throw ValidationError("names length does not match the variables axis");
  }
  std::vector<Matrix<double>> cd;
  for (py::ssize_t c = 0; c < b.shape(0); ++c) {
    Matrix<double> m(static_cast<std::size_t>(b.shape(1)), names.size());
    for (py::ssize_t i = 0; i < b.shape(1); ++i)
      for (py::ssize_t j = 0; j < b.shape(2); ++j) m(i, j) = b(c, i, j);
    cd.push_back(std::move(m));
  }
  py::list out;
  for (const SummaryRow& r : summarize(cd, names)) {
    py::dict row;
    row["variable"] = r.variable;
    row["mean"] = r.mean;
    row["median"] = r.median;
    row["sd"] = r.sd;
    row["mad"] = r.mad;
    row["q5"] = r.q5;
    row["q95"] = r.q95;
    row["rhat"] = r.rhat;
    row["ess_bulk"] = r.ess_bulk;
    row["ess_tail"] = r.ess_tail;
    out.append(row);
  }
  return out;
}

py::dict py_psis_loo(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& log_lik) {
  if (log_lik.ndim() != 2) throw ValidationError("expected a (draws, observations) array");
  auto b = log_lik.unchecked<2>();
  Matrix<double> ll(static_cast<std::size_t>(b.shape(0)), static_cast<std::size_t>(b.shape(1)));
  for (py::ssize_t i = 0; i < b.shape(0); ++i)
    for (py::ssize_t j = 0; j < b.shape(1); ++j) ll(i, j) = b(i, j);
  const LooResult r = psis_loo(ll);
  py::array_t<double> elpd_i(r.pointwise.size()), khat(r.pointwise.size());
  auto e_b = elpd_i.mutable_unchecked<1>();
  auto k_b = khat.mutable_unchecked<1>();
  for (std::size_t i = 0; i < r.pointwise.size(); ++i) {
    e_b(i) = r.pointwise[i].elpd;
    k_b(i) = r.pointwise[i].khat;
  }
  py::dict out;
  out["elpd_loo"] = r.elpd_loo;
  out["se"] = r.se;
  out["elpd_i"] = elpd_i;
  out["khat"] = khat;
  out["n_bad"] = r.n_bad;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, mod) {
  mod.doc() = "Bayesian PK/PD compartment models: schedule solvers, NUTS, diagnostics";

  py::register_exception<ValidationError>(mod, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(mod, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(mod, "IoError", PyExc_OSError);

  mod.def("builtin_models", &builtin_model_names, "Names accepted by fit/simulate.");

  mod.def("solve_twocpt", &py_solve_twocpt, py::arg("data"), py::arg("cl"), py::arg("q"),
          py::arg("vc"), py::arg("vp"), py::arg("ka"),
          "Amounts (records x 3: gut, central, peripheral) over one subject's schedule.");
  mod.def("solve_onecpt", &py_solve_onecpt, py::arg("data"), py::arg("cl"), py::arg("v"),
          py::arg("ka"), "Amounts (records x 2: gut, central) over one subject's schedule.");
  mod.def("solve_fk", &py_fk_solve, py::arg("data"), py::arg("theta"), py::arg("rtol") = 1e-6,
          py::arg("atol") = 1e-6, py::arg("max_steps") = 100000,
          py::arg("full_numeric") = false,
          "Friberg-Karlsson pkpd states (records x 8) for theta keyed by "
          "CL, Q, V1, V2, ka, MTT, Circ0, alpha, gamma.");

  mod.def("simulate", &py_simulate, py::arg("model"), py::arg("data"), py::arg("params"),
          py::arg("seed") = 1, py::arg("priors") = py::none(), py::arg("rtol") = 1e-6,
          py::arg("atol") = 1e-6, py::arg("max_steps") = 100000,
          py::arg("fk_full_numeric") = false,
          "Posterior-predictive DV per observation row at fixed parameters; sigma = 0 gives "
          "the noise-free predictions.");

  mod.def("fit", &py_fit, py::arg("model"), py::arg("data"), py::arg("chains") = 4,
          py::arg("warmup") = 1000, py::arg("sampling") = 1000, py::arg("seed") = 1,
          py::arg("target_accept") = 0.8, py::arg("max_treedepth") = 10,
          py::arg("init") = "prior", py::arg("priors") = py::none(), py::arg("rtol") = 1e-6,
          py::arg("atol") = 1e-6, py::arg("max_steps") = 100000,
          py::arg("fk_full_numeric") = false,
          "NUTS fit; returns constrained draws (chains, sampling, params), generated "
          "quantities and per-iteration sampler statistics.");

  mod.def(
      "rhat",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return split_rank_rhat(chains_from_array(x));
      },
      py::arg("chains"), "Rank-normalized split R-hat of one variable, shaped (chains, iters).");
  mod.def(
      "ess_bulk",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return ess_bulk(chains_from_array(x));
      },
      py::arg("chains"), "Bulk effective sample size of one variable, shaped (chains, iters).");
  mod.def(
      "ess_tail",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return ess_tail(chains_from_array(x));
      },
      py::arg("chains"), "Tail effective sample size of one variable, shaped (chains, iters).");

  mod.def("summarize", &py_summarize, py::arg("draws"), py::arg("names"),
          "Summary rows (mean/median/sd/mad/q5/q95/rhat/ess) for (chains, iters, vars) draws.");
  mod.def("psis_loo", &py_psis_loo, py::arg("log_lik"),
          "PSIS-LOO from a (draws, observations) log-likelihood matrix.");
}

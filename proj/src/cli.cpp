#include "pmx/cli.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pmx/common.hpp"
#include "pmx/csv.hpp"
#include "pmx/events.hpp"
#include "pmx/mcstats.hpp"
#include "pmx/models.hpp"
#include "pmx/nuts.hpp"
#include "pmx/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pmx {
namespace {

// ---------------------------------------------------------------------------
// Small utilities.

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  return os;
}

std::string sibling(const std::string& reference_path, const std::string& filename) {
  fs::path dir = fs::path(reference_path).parent_path();
  if (dir.empty()) dir = ".";
  return (dir / filename).string();
}

// Flat key=value file ('#' comments), used for --params and --init files.
std::map<std::string, double> read_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::map<std::string, double> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path + " line " + std::to_string(lineno) +
                            ": expected name=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ValidationError(path + " line " + std::to_string(lineno) + ": empty name");
    }
    if (kv.count(key)) {
      throw ValidationError(path + " line " + std::to_string(lineno) + ": duplicate name " + key);
    }
    kv[key] = parse_double(val, path + " line " + std::to_string(lineno) + " " + key);
  }
  return kv;
}

// Parameter vector in model order from a name=value file; every parameter
// must be present and no extras are allowed.
std::vector<double> params_from_file(const Model& m, const std::string& path) {
  const std::map<std::string, double> kv = read_kv_file(path);
  const auto& names = m.param_names();
  std::vector<double> theta;
  theta.reserve(names.size());
  for (const auto& n : names) {
    const auto it = kv.find(n);
    if (it == kv.end()) {
      throw ValidationError(path + ": missing value for parameter " + n);
    }
    theta.push_back(it->second);
  }
  for (const auto& [k, v] : kv) {
    (void)v;
    if (std::find(names.begin(), names.end(), k) == names.end()) {
      throw ValidationError(path + ": unknown parameter " + k + " for model " + m.name());
    }
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Config file: flat sections of key=value pairs. CLI flags override config;
// config overrides the built-in defaults.

struct IniFile {
  // section -> key -> value (strings; interpreted by the consumer)
  std::map<std::string, std::map<std::string, std::string>> sections;
};

IniFile read_ini(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  IniFile ini;
  std::string line, section;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ValidationError(path + " line " + std::to_string(lineno) +
                              ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) {
        throw ValidationError(path + " line " + std::to_string(lineno) + ": empty section name");
      }
      ini.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path + " line " + std::to_string(lineno) +
                            ": expected key=value, got '" + line + "'");
    }
    if (section.empty()) {
      throw ValidationError(path + " line " + std::to_string(lineno) +
                            ": key=value before any [section]");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || ini.sections[section].count(key)) {
      throw ValidationError(path + " line " + std::to_string(lineno) +
                            (key.empty() ? ": empty key" : ": duplicate key " + key));
    }
    ini.sections[section][key] = val;
  }
  return ini;
}

// ---------------------------------------------------------------------------
// Resolved run options shared by the commands.

struct RunOptions {
  std::string model = "twocpt";
  std::string data_path;
  std::string config_path;
  std::string output_dir = "pmx_out";
  std::string output_path;  // simulate/ppc/loo single-file output
  std::string params_path;  // simulate
  std::string draws_path;   // ppc/loo/summary
  std::string draws2_path;  // loo comparison
  std::string init = "prior";
  bool demo = false;
  bool fk_full_numeric = false;
  SamplerConfig sampler;
  OdeControls ode;
  std::map<std::string, double> priors;
};

long parse_config_int(const std::string& key, const std::string& val, long lo, long hi) {
  const double v = parse_double(val, "config key " + key);
  if (std::isnan(v) || v != std::floor(v) || v < static_cast<double>(lo) ||
      v > static_cast<double>(hi)) {
    throw ValidationError("config key " + key + ": expected an integer in [" +
                          std::to_string(lo) + ", " + std::to_string(hi) + "], got '" + val +
                          "'");
  }
  return static_cast<long>(v);
}

void apply_config(RunOptions& ro) {
  if (ro.config_path.empty()) return;
  const IniFile ini = read_ini(ro.config_path);
  for (const auto& [section, kv] : ini.sections) {
    if (section == "sampler") {
      for (const auto& [k, v] : kv) {
        if (k == "chains") {
          ro.sampler.chains = static_cast<int>(parse_config_int(k, v, 1, 1024));
        } else if (k == "warmup") {
          ro.sampler.warmup = static_cast<int>(parse_config_int(k, v, 0, 1000000));
        } else if (k == "sampling") {
          ro.sampler.sampling = static_cast<int>(parse_config_int(k, v, 0, 1000000));
        } else if (k == "seed") {
          ro.sampler.seed =
              static_cast<std::uint64_t>(parse_config_int(k, v, 0, 4503599627370495L));
        } else if (k == "target_accept") {
          ro.sampler.target_accept = parse_double(v, "config key target_accept");
        } else if (k == "max_treedepth") {
          ro.sampler.max_treedepth = static_cast<int>(parse_config_int(k, v, 1, 20));
        } else if (k == "init") {
          ro.init = v;
        } else {
          throw ValidationError("config: unknown key '" + k + "' in [sampler]");
        }
      }
    } else if (section == "ode") {
      for (const auto& [k, v] : kv) {
        if (k == "rtol") {
          ro.ode.rtol = parse_double(v, "config key rtol");
        } else if (k == "atol") {
          ro.ode.atol = parse_double(v, "config key atol");
        } else if (k == "max_steps") {
          ro.ode.max_num_step = static_cast<int>(parse_config_int(k, v, 1, 1000000000));
        } else {
          throw ValidationError("config: unknown key '" + k + "' in [ode]");
        }
      }
    } else if (section == "priors") {
      for (const auto& [k, v] : kv) ro.priors[k] = parse_double(v, "config key " + k);
    } else {
      throw ValidationError("config: unknown section [" + section + "]");
    }
  }
}

std::string config_hash(const RunOptions& ro) {
  std::ostringstream ss;
  ss << "model=" << ro.model << ";chains=" << ro.sampler.chains
     << ";warmup=" << ro.sampler.warmup << ";sampling=" << ro.sampler.sampling
     << ";seed=" << ro.sampler.seed << ";target_accept=" << format_double(ro.sampler.target_accept)
     << ";max_treedepth=" << ro.sampler.max_treedepth << ";init=" << ro.init
     << ";rtol=" << format_double(ro.ode.rtol) << ";atol=" << format_double(ro.ode.atol)
     << ";max_steps=" << ro.ode.max_num_step << ";fk_full_numeric=" << ro.fk_full_numeric;
  for (const auto& [k, v] : ro.priors) ss << ";prior." << k << "=" << format_double(v);
  return hex64(fnv1a(ss.str()));
}

ModelOptions model_options(const RunOptions& ro) {
  ModelOptions mo;
  mo.ode = ro.ode;
  mo.fk_full_numeric = ro.fk_full_numeric;
  mo.priors = ro.priors;
  return mo;
}

// ---------------------------------------------------------------------------
// Demo study: 1200 mg oral boluses every 12 h for 14 doses; rich sampling
// after the first, second and last dose; a trough right before every
// subsequent dose; and 12, 18 and 24 h follow-ups after the last dose. The
// dose template is the final input row so that a trough drawn at a dose time
// sorts ahead of the dose given immediately after it.

Dataset demo_dataset() {
  std::vector<EventRecord> recs;
  std::size_t row = 1;
  auto obs = [&](double t) {
    EventRecord r;
    r.time = t;
    r.evid = 0;
    r.cmt = 2;
    r.origin_row = row++;
    recs.push_back(r);
  };
  const double rich[] = {0.083, 0.167, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0};
  for (double t : rich) obs(t);
  for (double t : rich) obs(12.0 + t);
  for (int d = 1; d <= 13; ++d) obs(12.0 * d);
  for (double t : rich) obs(156.0 + t);
  obs(168.0);
  obs(174.0);
  obs(180.0);
  EventRecord dose;
  dose.amt = 1200.0;
  dose.ii = 12.0;
  dose.addl = 13;
  dose.evid = 1;
  dose.cmt = 1;
  dose.origin_row = row++;
  recs.push_back(dose);
  return make_dataset(std::move(recs));
}

const std::map<std::string, double> kDemoTruths = {{"CL", 10.0}, {"Q", 15.0},  {"VC", 35.0},
                                                   {"VP", 105.0}, {"ka", 2.5}, {"sigma", 0.22}};

// ---------------------------------------------------------------------------
// Artifact writers and readers.

void write_dataset_csv(const std::string& path, const Dataset& ds,
                       const std::vector<double>& dv_by_obs) {
  std::ofstream os = open_out(path);
  std::vector<std::string> covs;
  for (const auto& [name, col] : ds.covariates) {
    (void)col;
    covs.push_back(name);
  }
  os << "ID,TIME,AMT,RATE,II,EVID,CMT,ADDL,SS,DV";
  for (const auto& c : covs) os << ',' << c;
  os << '\n';

  // Map record index -> observation slot (input-row order).
  std::vector<std::size_t> obs_slot(ds.records.size(), static_cast<std::size_t>(-1));
  for (std::size_t k = 0; k < ds.obs_index.size(); ++k) obs_slot[ds.obs_index[k]] = k;

  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const EventRecord& r = ds.records[i];
    double dv = r.dv;
    if (r.evid == 0 && !dv_by_obs.empty()) dv = dv_by_obs[obs_slot[i]];
    os << r.subject << ',' << format_double(r.time) << ',' << format_double(r.amt) << ','
       << format_double(r.rate) << ',' << format_double(r.ii) << ',' << r.evid << ',' << r.cmt
       << ',' << r.addl << ',' << r.ss << ',' << (std::isnan(dv) ? "." : format_double(dv));
    for (const auto& c : covs) {
      const double v = ds.covariates.at(c)[i];
      os << ',' << (std::isnan(v) ? "." : format_double(v));
    }
    os << '\n';
  }
}

struct DrawsFile {
  std::vector<std::string> columns;
  Matrix<double> values;  // all rows, pooled over chains in file order
  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ValidationError("draws file has no column " + name);
  }
  bool has_col(const std::string& name) const {
    return std::find(columns.begin(), columns.end(), name) != columns.end();
  }
};

DrawsFile read_draws_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  DrawsFile d;
  d.columns = t.header;
  d.values = Matrix<double>(t.rows.size(), t.header.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      d.values(r, c) =
          parse_double(t.rows[r][c], path + " row " + std::to_string(r + 2) + " " + t.header[c]);
    }
  }
  return d;
}

json read_manifest(const std::string& draws_path) {
  const std::string mp = sibling(draws_path, "manifest.json");
  std::ifstream is(mp);
  if (!is) throw IoError("manifest.json not found next to the draws file: " + mp);
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw IoError(mp + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// fit

int cmd_fit(const RunOptions& ro, std::ostream& out) {
  const Dataset ds = read_dataset_csv(ro.data_path);
  const std::unique_ptr<Model> model = make_model(ro.model, ds, model_options(ro));

  SamplerConfig scfg = ro.sampler;
  if (ro.init == "prior") {
    scfg.init_mode = InitMode::kPrior;
  } else if (ro.init == "uniform") {
    scfg.init_mode = InitMode::kUniform;
  } else {
    const std::vector<double> theta = params_from_file(*model, ro.init);
    scfg.init_mode = InitMode::kValue;
    scfg.init_value = model->unconstrain(theta);
  }

  const Target target = model_target(*model);
  const std::vector<ChainResult> results = nuts_sample(target, scfg);

  try {
    fs::create_directories(ro.output_dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot create output directory: ") + e.what());
  }
  const std::string draws_path = (fs::path(ro.output_dir) / "draws.csv").string();
  const std::string summary_path = (fs::path(ro.output_dir) / "summary.csv").string();
  const std::string diag_path = (fs::path(ro.output_dir) / "diagnostics.txt").string();
  const std::string manifest_path = (fs::path(ro.output_dir) / "manifest.json").string();

  const bool warmup_only = scfg.sampling == 0;
  const int per_chain = warmup_only ? scfg.warmup : scfg.sampling;
  const int row_offset = warmup_only ? 0 : scfg.warmup;
  const auto& pnames = model->param_names();
  const auto& gnames = model->gq_names();
  const std::size_t dim = model->dim();

  // Constrained draws per chain (reused for draws.csv and the summary).
  std::vector<Matrix<double>> constrained;
  std::vector<std::vector<double>> lp_rows;
  for (const ChainResult& r : results) {
    Matrix<double> m(static_cast<std::size_t>(per_chain), dim);
    std::vector<double> lp(static_cast<std::size_t>(per_chain));
    std::vector<double> z(dim);
    for (int i = 0; i < per_chain; ++i) {
      for (std::size_t j = 0; j < dim; ++j) z[j] = r.draws(row_offset + i, j);
      const std::vector<double> theta = model->constrain(z);
      for (std::size_t j = 0; j < dim; ++j) m(i, j) = theta[j];
      lp[i] = r.lp[row_offset + i];
    }
    constrained.push_back(std::move(m));
    lp_rows.push_back(std::move(lp));
  }

  {
    std::ofstream os = open_out(draws_path);
    os << "chain,iteration,lp,accept_stat,treedepth,divergent,energy";
    for (const auto& n : pnames) os << ',' << n;
    for (const auto& n : gnames) os << ',' << n;
    os << '\n';
    std::vector<double> theta(dim);
    for (std::size_t c = 0; c < results.size(); ++c) {
      const ChainResult& r = results[c];
      for (int i = 0; i < per_chain; ++i) {
        const int row = row_offset + i;
        os << (c + 1) << ',' << (i + 1) << ',' << format_double(r.lp[row]) << ','
           << format_double(r.accept_stat[row]) << ',' << r.treedepth[row] << ','
           << int(r.divergent[row]) << ',' << format_double(r.energy[row]);
        for (std::size_t j = 0; j < dim; ++j) {
          theta[j] = constrained[c](i, j);
          os << ',' << format_double(theta[j]);
        }
        Rng gq_rng(scfg.seed, c, static_cast<std::uint64_t>(i) + 1);
        const std::vector<double> gq = model->generated_quantities(theta, gq_rng);
        for (double g : gq) os << ',' << format_double(g);
        os << '\n';
      }
    }
  }

  std::vector<std::string> warnings;
  if (warmup_only) {
    warnings.push_back(
        "sampling = 0: draws.csv holds warmup draws only and summary.csv was not written");
  } else {
    std::vector<Matrix<double>> chain_vars;
    for (std::size_t c = 0; c < results.size(); ++c) {
      Matrix<double> m(static_cast<std::size_t>(per_chain), 1 + dim);
      for (int i = 0; i < per_chain; ++i) {
        m(i, 0) = lp_rows[c][i];
        for (std::size_t j = 0; j < dim; ++j) m(i, 1 + j) = constrained[c](i, j);
      }
      chain_vars.push_back(std::move(m));
    }
    std::vector<std::string> vnames{"lp"};
    vnames.insert(vnames.end(), pnames.begin(), pnames.end());
    const std::vector<SummaryRow> rows = summarize(chain_vars, vnames);
    {
      std::ofstream os = open_out(summary_path);
      write_summary_csv(os, rows);
    }
    for (const SummaryRow& rsm : rows) {
      if (rsm.rhat > 1.01) {
        warnings.push_back("rhat for " + rsm.variable + " is " + format_double(rsm.rhat) +
                           " (> 1.01)");
      }
    }
    for (const SummaryRow& rsm : rows) {
      if (rsm.ess_bulk < 100.0) {
        warnings.push_back("ess_bulk for " + rsm.variable + " is " + format_double(rsm.ess_bulk) +
                           " (< 100)");
      }
    }
  }
  int divergences = 0, depth_hits = 0;
  for (const ChainResult& r : results) {
    divergences += r.divergences_sampling;
    depth_hits += r.max_depth_hits_sampling;
  }
  if (divergences > 0) {
    warnings.push_back(std::to_string(divergences) + " divergent transitions in " +
                       std::to_string(scfg.chains * scfg.sampling) + " sampling iterations");
  }
  if (depth_hits > 0) {
    warnings.push_back(std::to_string(depth_hits) + " transitions hit max_treedepth = " +
                       std::to_string(scfg.max_treedepth));
  }
  {
    std::ofstream os = open_out(diag_path);
    for (const auto& w : warnings) os << "warning: " << w << '\n';
  }

  {
    json manifest;
    manifest["model"] = model->name();
    manifest["seed"] = scfg.seed;
    manifest["chains"] = scfg.chains;
    manifest["warmup"] = scfg.warmup;
    manifest["sampling"] = scfg.sampling;
    manifest["config_hash"] = config_hash(ro);
    manifest["params"] = pnames;
    manifest["gq"] = gnames;
    manifest["n_obs"] = model->obs_info().size();
    manifest["data"] = ro.data_path;
    std::ofstream os = open_out(manifest_path);
    os << manifest.dump(2) << '\n';
  }

  out << "fit: model " << model->name() << ", " << scfg.chains << " chains x (" << scfg.warmup
      << " warmup + " << scfg.sampling << " sampling), " << model->obs_info().size()
      << " observations\n";
  double eps_lo = kInf, eps_hi = -kInf;
  for (const ChainResult& r : results) {
    eps_lo = std::min(eps_lo, r.step_size);
    eps_hi = std::max(eps_hi, r.step_size);
  }
  out << "adapted step size in [" << format_double(eps_lo) << ", " << format_double(eps_hi)
      << "]\n";
  out << "wrote " << draws_path << '\n';
  if (!warmup_only) out << "wrote " << summary_path << '\n';
  out << "wrote " << manifest_path << '\n';
  if (warnings.empty()) {
    out << "diagnostics: clean\n";
  } else {
    out << "diagnostics: " << warnings.size() << " warning(s), see " << diag_path << '\n';
    for (const auto& w : warnings) out << "warning: " << w << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const RunOptions& ro, std::ostream& out) {
  if (ro.demo == !ro.data_path.empty()) {
    // demo with data, or neither
    throw ValidationError("simulate needs exactly one of --demo or --data <schedule.csv>");
  }
  if (ro.demo && ro.model != "twocpt") {
    throw ValidationError("--demo is a twocpt study design; got model " + ro.model);
  }
  const Dataset ds = ro.demo ? demo_dataset() : read_dataset_csv(ro.data_path);
  const std::unique_ptr<Model> model = make_model(ro.model, ds, model_options(ro));

  std::vector<double> theta;
  if (!ro.params_path.empty()) {
    theta = params_from_file(*model, ro.params_path);
  } else if (ro.demo) {
    for (const auto& n : model->param_names()) theta.push_back(kDemoTruths.at(n));
  } else {
    throw ValidationError("simulate needs --params <file> when --demo is not used");
  }

  Rng rng(ro.sampler.seed);
  const std::vector<double> dv = model->simulate_dv(theta, rng);
  write_dataset_csv(ro.output_path, model->data(), dv);

  int doses = 0;
  for (const EventRecord& r : model->data().records) doses += r.evid == 1 ? 1 : 0;
  out << "simulate: model " << model->name() << ", seed " << ro.sampler.seed << ", " << doses
      << " dose rows, " << dv.size() << " observations\n";
  out << "wrote " << ro.output_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// ppc

int cmd_ppc(const RunOptions& ro, std::ostream& out) {
  const json manifest = read_manifest(ro.draws_path);
  const std::string fit_model = manifest.at("model").get<std::string>();
  if (!ro.model.empty() && ro.model != fit_model) {
    throw ValidationError("model mismatch: draws were fit with " + fit_model + ", ppc asked for " +
                          ro.model);
  }
  const Dataset ds = read_dataset_csv(ro.data_path);
  const std::unique_ptr<Model> model = make_model(fit_model, ds, model_options(ro));
  if (manifest.at("params").get<std::vector<std::string>>() != model->param_names() ||
      manifest.at("gq").get<std::vector<std::string>>() != model->gq_names()) {
    throw ValidationError(
        "data/model mismatch: the parameter and generated-quantity names for this data do not "
        "match the fit manifest");
  }

  const DrawsFile draws = read_draws_csv(ro.draws_path);
  const auto& obs = model->obs_info();
  const bool pop_new = std::find_if(model->gq_names().begin(), model->gq_names().end(),
                                    [](const std::string& n) {
                                      return n.rfind("cObsPredNew.", 0) == 0;
                                    }) != model->gq_names().end();

  auto column_quantiles = [&](const std::string& name) {
    const std::size_t c = draws.col(name);
    std::vector<double> v(draws.values.rows());
    for (std::size_t r = 0; r < v.size(); ++r) v[r] = draws.values(r, c);
    const double q5 = quantile_type7(v, 0.05);
    const double q50 = quantile_type7(v, 0.50);
    const double q95 = quantile_type7(std::move(v), 0.95);
    return std::array<double, 3>{q5, q50, q95};
  };

  std::ofstream os = open_out(ro.output_path);
  os << "time,observed,q5,q50,q95";
  if (pop_new) os << ",q5_new,q50_new,q95_new";
  os << '\n';
  std::size_t conc_seen = 0, anc_seen = 0, covered = 0, scored = 0;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const std::string col =
        obs[k].concentration ? "cObsPred." + std::to_string(++conc_seen)
                             : "neutObsPred." + std::to_string(++anc_seen);
    const auto q = column_quantiles(col);
    const double observed = model->data().records[obs[k].record_index].dv;
    os << format_double(obs[k].time) << ',' << (std::isnan(observed) ? "." : format_double(observed))
       << ',' << format_double(q[0]) << ',' << format_double(q[1]) << ',' << format_double(q[2]);
    if (pop_new) {
      const auto qn = column_quantiles("cObsPredNew." + std::to_string(conc_seen));
      os << ',' << format_double(qn[0]) << ',' << format_double(qn[1]) << ','
         << format_double(qn[2]);
    }
    os << '\n';
    if (obs[k].in_likelihood && std::isfinite(observed)) {
      ++scored;
      if (observed >= q[0] && observed <= q[2]) ++covered;
    }
  }
  out << "ppc: " << obs.size() << " observations, " << covered << " of " << scored
      << " scored observations inside [q5, q95]\n";
  out << "wrote " << ro.output_path << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// loo

Matrix<double> log_lik_matrix(const DrawsFile& draws, const std::string& path) {
  std::vector<std::pair<std::size_t, std::size_t>> cols;  // (obs id, column)
  for (std::size_t c = 0; c < draws.columns.size(); ++c) {
    const std::string& n = draws.columns[c];
    if (n.rfind("log_lik.", 0) == 0) {
      cols.emplace_back(std::stoul(n.substr(8)), c);
    }
  }
  if (cols.empty()) {
    throw ValidationError(path +
                          " has no log_lik.* columns; refit to store the log_lik generated "
                          "quantities");
  }
  std::sort(cols.begin(), cols.end());
  Matrix<double> ll(draws.values.rows(), cols.size());
  for (std::size_t r = 0; r < draws.values.rows(); ++r) {
    for (std::size_t j = 0; j < cols.size(); ++j) ll(r, j) = draws.values(r, cols[j].second);
  }
  return ll;
}

int cmd_loo(const RunOptions& ro, std::ostream& out) {
  const DrawsFile draws = read_draws_csv(ro.draws_path);
  const Matrix<double> ll = log_lik_matrix(draws, ro.draws_path);
  const LooResult res = psis_loo(ll);

  {
    std::ofstream os = open_out(ro.output_path);
    os << "obs_id,elpd_i,khat\n";
    for (std::size_t i = 0; i < res.pointwise.size(); ++i) {
      os << (i + 1) << ',' << format_double(res.pointwise[i].elpd) << ','
         << format_double(res.pointwise[i].khat) << '\n';
    }
  }
  out << "elpd_loo=" << format_double(res.elpd_loo) << " se=" << format_double(res.se) << '\n';
  for (std::size_t i = 0; i < res.pointwise.size(); ++i) {
    if (res.pointwise[i].khat > 0.7) {
      out << "warning: khat = " << format_double(res.pointwise[i].khat) << " > 0.7 for obs "
          << (i + 1) << '\n';
    }
  }
  out << "wrote " << ro.output_path << '\n';

  if (!ro.draws2_path.empty()) {
    const DrawsFile draws2 = read_draws_csv(ro.draws2_path);
    const Matrix<double> ll2 = log_lik_matrix(draws2, ro.draws2_path);
    if (ll2.cols() != ll.cols()) {
      throw ValidationError("loo comparison: the fits score different observation counts (" +
                            std::to_string(ll.cols()) + " vs " + std::to_string(ll2.cols()) +
                            ")");
    }
    const LooResult res2 = psis_loo(ll2);
    const LooComparison cmp = loo_compare(res, res2);
    out << "elpd_diff=" << format_double(cmp.elpd_diff) << " se_diff="
        << format_double(cmp.se_diff) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// summary

int cmd_summary(const RunOptions& ro, std::ostream& out) {
  const DrawsFile draws = read_draws_csv(ro.draws_path);
  static const std::vector<std::string> kMeta{"chain",     "iteration", "lp",    "accept_stat",
                                              "treedepth", "divergent", "energy"};
  // Variables: lp plus the fitted parameters when a manifest is available,
  // otherwise every non-meta column.
  std::vector<std::string> vnames{"lp"};
  const std::string manifest_path = sibling(ro.draws_path, "manifest.json");
  if (fs::exists(manifest_path)) {
    const json manifest = read_manifest(ro.draws_path);
    for (const auto& n : manifest.at("params").get<std::vector<std::string>>())
      vnames.push_back(n);
  } else {
    for (const auto& n : draws.columns) {
      if (std::find(kMeta.begin(), kMeta.end(), n) == kMeta.end()) vnames.push_back(n);
    }
  }

  const std::size_t chain_col = draws.col("chain");
  std::vector<int> chain_ids;
  std::vector<std::vector<std::size_t>> chain_rows;
  for (std::size_t r = 0; r < draws.values.rows(); ++r) {
    const int c = static_cast<int>(draws.values(r, chain_col));
    auto it = std::find(chain_ids.begin(), chain_ids.end(), c);
    if (it == chain_ids.end()) {
      chain_ids.push_back(c);
      chain_rows.emplace_back();
      it = chain_ids.end() - 1;
    }
    chain_rows[static_cast<std::size_t>(it - chain_ids.begin())].push_back(r);
  }
  for (const auto& rows : chain_rows) {
    if (rows.size() != chain_rows.front().size()) {
      throw ValidationError(ro.draws_path + ": chains have unequal draw counts");
    }
  }

  std::vector<std::size_t> vcols;
  for (const auto& n : vnames) vcols.push_back(draws.col(n));
  std::vector<Matrix<double>> chain_vars;
  for (const auto& rows : chain_rows) {
    Matrix<double> m(rows.size(), vnames.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < vnames.size(); ++j) m(i, j) = draws.values(rows[i], vcols[j]);
    }
    chain_vars.push_back(std::move(m));
  }

  const std::vector<SummaryRow> rows = summarize(chain_vars, vnames);
  std::size_t width = 8;
  for (const SummaryRow& r : rows) width = std::max(width, r.variable.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s %10s %10s %8s %9s %9s\n",
                static_cast<int>(width), "variable", "mean", "median", "sd", "mad", "q5", "q95",
                "rhat", "ess_bulk", "ess_tail");
  out << buf;
  for (const SummaryRow& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%-*s %10.4g %10.4g %10.4g %10.4g %10.4g %10.4g %8.4f %9.0f %9.0f\n",
                  static_cast<int>(width), r.variable.c_str(), r.mean, r.median, r.sd, r.mad, r.q5,
                  r.q95, r.rhat, r.ess_bulk, r.ess_tail);
    out << buf;
  }
  if (!ro.output_path.empty()) {
    std::ofstream os = open_out(ro.output_path);
    write_summary_csv(os, rows);
    out << "wrote " << ro.output_path << '\n';
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Argument parsing and dispatch.

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian inference for PK/PD compartment models"};
  app.require_subcommand(1);

  RunOptions ro;
  // Raw flag storage; only values the user actually passed are applied, so
  // that config-file settings are not clobbered by defaults.
  int chains = 0, warmup = 0, sampling = 0, max_treedepth = 0, max_steps = 0;
  std::uint64_t seed = 0;
  double target_accept = 0, rtol = 0, atol = 0;
  std::string init;

  auto add_sampler_flags = [&](CLI::App* cmd) {
    cmd->add_option("--chains", chains, "Number of chains (default 4)");
    cmd->add_option("--warmup", warmup, "Warmup iterations per chain (default 1000)");
    cmd->add_option("--sampling", sampling, "Sampling iterations per chain (default 1000)");
    cmd->add_option("--seed", seed, "Random seed (default 1)");
    cmd->add_option("--target-accept", target_accept, "Dual-averaging target in (0,1)");
    cmd->add_option("--max-treedepth", max_treedepth, "Doubling cap per transition");
    cmd->add_option("--init", init, "prior | uniform | <name=value file>");
  };
  auto add_ode_flags = [&](CLI::App* cmd) {
    cmd->add_option("--rtol", rtol, "ODE relative tolerance");
    cmd->add_option("--atol", atol, "ODE absolute tolerance");
    cmd->add_option("--max-steps", max_steps, "ODE max steps per interval");
    cmd->add_flag("--fk-full-numeric", ro.fk_full_numeric,
                  "Integrate all eight neutropenia states numerically");
  };

  CLI::App* fit = app.add_subcommand("fit", "Sample the posterior with NUTS");
  fit->add_option("--model", ro.model, "Built-in model name")->capture_default_str();
  fit->add_option("--data", ro.data_path, "Dataset CSV")->required();
  fit->add_option("--config", ro.config_path, "key=value config file");
  fit->add_option("--output-dir", ro.output_dir, "Artifact directory")->capture_default_str();
  add_sampler_flags(fit);
  add_ode_flags(fit);

  CLI::App* sim = app.add_subcommand("simulate", "Draw a dataset at fixed parameters");
  sim->add_option("--model", ro.model, "Built-in model name")->capture_default_str();
  sim->add_option("--data", ro.data_path, "Schedule template CSV (DV ignored)");
  sim->add_flag("--demo", ro.demo, "Built-in study: 1200 mg q12h x 14 with rich sampling");
  sim->add_option("--params", ro.params_path, "name=value file of simulating parameters");
  sim->add_option("--config", ro.config_path, "key=value config file");
  sim->add_option("--output", ro.output_path, "Output dataset CSV")->required();
  sim->add_option("--seed", seed, "Random seed (default 1)");
  add_ode_flags(sim);

  CLI::App* ppc = app.add_subcommand("ppc", "Posterior predictive intervals per observation");
  ppc->add_option("--model", ro.model, "Built-in model name (default: from manifest)");
  ppc->add_option("--data", ro.data_path, "Dataset CSV used for the fit")->required();
  ppc->add_option("--draws", ro.draws_path, "draws.csv from fit")->required();
  ppc->add_option("--config", ro.config_path, "key=value config file");
  ppc->add_option("--output", ro.output_path, "Output CSV (default: ppc.csv next to draws)");

  CLI::App* loo = app.add_subcommand("loo", "PSIS-LOO expected log predictive density");
  loo->add_option("--draws", ro.draws_path, "draws.csv from fit")->required();
  loo->add_option("--draws2", ro.draws2_path, "Second fit's draws.csv for comparison");
  loo->add_option("--output", ro.output_path, "Output CSV (default: loo.csv next to draws)");

  CLI::App* summary = app.add_subcommand("summary", "Posterior summary table from draws.csv");
  summary->add_option("--draws", ro.draws_path, "draws.csv from fit")->required();
  summary->add_option("--output", ro.output_path, "Also write the table as CSV");

  std::vector<const char*> argv;
  argv.push_back("pmx");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw ValidationError(e.what());
    }

    if (ppc->parsed() && !ppc->count("--model")) ro.model.clear();

    apply_config(ro);
    CLI::App* active = app.get_subcommands().front();
    auto passed = [&](const std::string& name) {
      const CLI::Option* o = active->get_option_no_throw(name);
      return o != nullptr && o->count() > 0;
    };
    if (passed("--chains")) ro.sampler.chains = chains;
    if (passed("--warmup")) ro.sampler.warmup = warmup;
    if (passed("--sampling")) ro.sampler.sampling = sampling;
    if (passed("--seed")) ro.sampler.seed = seed;
    if (passed("--target-accept")) ro.sampler.target_accept = target_accept;
    if (passed("--max-treedepth")) ro.sampler.max_treedepth = max_treedepth;
    if (passed("--init")) ro.init = init;
    if (passed("--rtol")) ro.ode.rtol = rtol;
    if (passed("--atol")) ro.ode.atol = atol;
    if (passed("--max-steps")) ro.ode.max_num_step = max_steps;

    if (fit->parsed()) return cmd_fit(ro, out);
    if (sim->parsed()) return cmd_simulate(ro, out);
    if (ppc->parsed()) {
      if (ro.output_path.empty()) ro.output_path = sibling(ro.draws_path, "ppc.csv");
      return cmd_ppc(ro, out);
    }
    if (loo->parsed()) {
      if (ro.output_path.empty()) ro.output_path = sibling(ro.draws_path, "loo.csv");
      return cmd_loo(ro, out);
    }
    if (summary->parsed()) return cmd_summary(ro, out);
    throw ValidationError("no command given");
  } catch (const ValidationError& e) {
    err << "error[validation]: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    err << "error[numerical]: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    err << "error[io]: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace pmx

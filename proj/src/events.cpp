#include "pmx/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "pmx/csv.hpp"

namespace pmx {

namespace {

std::string row_ctx(const EventRecord& r) { return "row " + std::to_string(r.origin_row); }

void validate_record(const EventRecord& r) {
  if (r.evid < 0 || r.evid > 4) {
    throw ValidationError(row_ctx(r) + ": evid " + std::to_string(r.evid) + " is not a valid code");
  }
  if (r.evid >= 2) {
    throw ValidationError(row_ctx(r) + ": evid " + std::to_string(r.evid) +
                          " (reset/other) is not supported; only evid 0 and 1 are accepted");
  }
  if (r.ss == 2) {
    throw ValidationError(row_ctx(r) + ": ss=2 (steady state without reset) is not supported");
  }
  if (r.ss != 0 && r.ss != 1) {
    throw ValidationError(row_ctx(r) + ": ss must be 0 or 1");
  }
  if (!std::isfinite(r.time) || r.time < 0.0) {
    throw ValidationError(row_ctx(r) + ": time must be finite and non-negative");
  }
  if (r.amt < 0.0 || r.rate < 0.0 || r.ii < 0.0) {
    throw ValidationError(row_ctx(r) + ": amt, rate and ii must be non-negative");
  }
  if (r.addl < 0) throw ValidationError(row_ctx(r) + ": addl must be non-negative");
  if (r.cmt < 1) throw ValidationError(row_ctx(r) + ": cmt must be >= 1");
  if (r.evid == 0) {
    if (r.amt != 0.0 || r.addl != 0 || r.ss != 0) {
      throw ValidationError(row_ctx(r) + ": observation rows must have amt=0, addl=0, ss=0");
    }
  } else {
    if (r.amt <= 0.0 && r.rate <= 0.0) {
      throw ValidationError(row_ctx(r) + ": dose rows need amt > 0 or rate > 0");
    }
    if (r.rate > 0.0 && r.amt <= 0.0) {
      throw ValidationError(row_ctx(r) + ": infusion rows need amt > 0");
    }
    if (r.addl > 0 && r.ii <= 0.0) {
      throw ValidationError(row_ctx(r) + ": addl > 0 requires ii > 0");
    }
    if (r.ss == 1 && r.ii <= 0.0) {
      throw ValidationError(row_ctx(r) + ": ss=1 requires ii > 0");
    }
  }
}

}  // namespace

Dataset make_dataset(std::vector<EventRecord> records,
                     std::map<std::string, std::vector<double>> covariates) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].origin_row == 0) records[i].origin_row = i + 1;
    validate_record(records[i]);
  }
  for (const auto& [name, col] : covariates) {
    if (col.size() != records.size()) {
      throw ValidationError("covariate " + name + " has " + std::to_string(col.size()) +
                            " values for " + std::to_string(records.size()) + " records");
    }
  }

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].subject != records[b].subject) return records[a].subject < records[b].subject;
    if (records[a].time != records[b].time) return records[a].time < records[b].time;
    return records[a].origin_row < records[b].origin_row;
  });

  Dataset ds;
  ds.records.reserve(records.size());
  for (std::size_t i : order) ds.records.push_back(records[i]);
  for (const auto& [name, col] : covariates) {
    std::vector<double> sorted(col.size());
    for (std::size_t k = 0; k < order.size(); ++k) sorted[k] = col[order[k]];
    ds.covariates.emplace(name, std::move(sorted));
  }

  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (i == 0 || ds.records[i].subject != ds.records[i - 1].subject) {
      if (i > 0) ds.subject_spans.back().second = i;
      ds.subject_spans.emplace_back(i, ds.records.size());
      ds.subject_ids.push_back(ds.records[i].subject);
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> obs;  // (origin_row, position)
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (ds.records[i].evid == 0) obs.emplace_back(ds.records[i].origin_row, i);
  }
  std::sort(obs.begin(), obs.end());
  for (const auto& [row, pos] : obs) ds.obs_index.push_back(pos);

  return ds;
}

Dataset read_dataset_csv(const std::string& path) {
  CsvTable t = read_csv(path);

  auto canon = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  };
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    std::string name = canon(t.header[i]);
    if (col.count(name)) throw ValidationError(path + ": duplicate column " + name);
    col[name] = i;
  }
  for (const char* req : {"ID", "TIME", "AMT", "RATE", "II", "EVID", "CMT", "ADDL", "SS", "DV"}) {
    if (!col.count(req)) throw ValidationError(path + ": missing required column " + req);
  }

  auto get_int = [&](const std::string& field, const std::string& name, std::size_t row) {
    double v = parse_double(field, path + " row " + std::to_string(row) + " " + name);
    if (std::isnan(v)) {
      throw ValidationError(path + " row " + std::to_string(row) + ": " + name + " is missing");
    }
    if (v != std::floor(v)) {
      throw ValidationError(path + " row " + std::to_string(row) + ": " + name +
                            " must be an integer, got " + field);
    }
    return static_cast<int>(v);
  };
  auto get_num = [&](const std::string& field, const std::string& name, std::size_t row,
                     bool allow_missing) {
    double v = parse_double(field, path + " row " + std::to_string(row) + " " + name);
    if (std::isnan(v) && !allow_missing) {
      throw ValidationError(path + " row " + std::to_string(row) + ": " + name + " is missing");
    }
    return v;
  };

  std::vector<EventRecord> records;
  std::map<std::string, std::vector<double>> covariates;
  std::vector<std::string> extra_names;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    std::string name = canon(t.header[i]);
    static const std::vector<std::string> known = {"ID", "TIME", "AMT",  "RATE", "II", "EVID",
                                                   "CMT", "ADDL", "SS",  "DV",   "MDV"};
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      covariates[name] = {};
      extra_names.push_back(name);
    }
  }

  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t rowno = r + 2;  // 1-based, after header
    EventRecord rec;
    rec.origin_row = rowno;
    rec.subject = get_int(row[col["ID"]], "ID", rowno);
    rec.time = get_num(row[col["TIME"]], "TIME", rowno, false);
    rec.amt = get_num(row[col["AMT"]], "AMT", rowno, false);
    rec.rate = get_num(row[col["RATE"]], "RATE", rowno, false);
    rec.ii = get_num(row[col["II"]], "II", rowno, false);
    rec.evid = get_int(row[col["EVID"]], "EVID", rowno);
    rec.cmt = get_int(row[col["CMT"]], "CMT", rowno);
    rec.addl = get_int(row[col["ADDL"]], "ADDL", rowno);
    rec.ss = get_int(row[col["SS"]], "SS", rowno);
    rec.dv = get_num(row[col["DV"]], "DV", rowno, true);
    records.push_back(rec);
    for (const auto& name : extra_names) {
      covariates[name].push_back(
          get_num(row[col[name]], name, rowno, true));
    }
  }

  return make_dataset(std::move(records), std::move(covariates));
}

Dataset expand_addl(const Dataset& ds) {
  std::vector<EventRecord> out;
  std::map<std::string, std::vector<double>> cov;
  for (const auto& [name, _] : ds.covariates) cov[name] = {};

  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EventRecord base = ds.records[i];
    const int k = base.addl;
    base.addl = 0;
    for (int j = 0; j <= k; ++j) {
      EventRecord copy = base;
      copy.time = base.time + j * base.ii;
      if (j > 0) copy.ss = 0;
      out.push_back(copy);
      for (auto& [name, colvals] : cov) colvals.push_back(ds.covariates.at(name)[i]);
    }
  }
  return make_dataset(std::move(out), std::move(cov));
}

double subject_covariate(const Dataset& ds, std::size_t subject_pos, const std::string& name) {
  auto it = ds.covariates.find(name);
  if (it == ds.covariates.end()) {
    throw ValidationError("dataset is missing required covariate column " + name);
  }
  auto [b, e] = ds.subject_spans.at(subject_pos);
  double v = it->second[b];
  for (std::size_t i = b; i < e; ++i) {
    double vi = it->second[i];
    if (std::isnan(vi) || vi != v) {
      throw ValidationError("covariate " + name + " must be constant within subject " +
                            std::to_string(ds.records[b].subject) + " (row " +
                            std::to_string(ds.records[i].origin_row) + ")");
    }
  }
  if (std::isnan(v)) {
    throw ValidationError("covariate " + name + " is missing for subject " +
                          std::to_string(ds.records[b].subject));
  }
  return v;
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "ID,TIME,AMT,RATE,II,EVID,CMT,ADDL,SS,DV";
  for (const auto& [name, _] : ds.covariates) f << "," << name;
  f << "\n";
  // Records go out in original row order so a template round-trips cleanly.
  std::vector<std::size_t> order(ds.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ds.records[a].origin_row < ds.records[b].origin_row;
  });
  for (std::size_t i : order) {
    const auto& r = ds.records[i];
    f << r.subject << ',' << format_double(r.time) << ',' << format_double(r.amt) << ','
      << format_double(r.rate) << ',' << format_double(r.ii) << ',' << r.evid << ',' << r.cmt
      << ',' << r.addl << ',' << r.ss << ',' << (std::isnan(r.dv) ? "." : format_double(r.dv));
    for (const auto& [name, colvals] : ds.covariates) {
      f << ',' << (std::isnan(colvals[i]) ? "." : format_double(colvals[i]));
    }
    f << "\n";
  }
  if (!f.good()) throw IoError("write failed for " + path);
}

}  // namespace pmx

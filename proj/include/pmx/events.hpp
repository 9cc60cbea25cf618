#pragma once

// Clinical event schedules in the NONMEM dataset convention:
// ID, TIME, AMT, RATE, II, EVID, CMT, ADDL, SS, DV plus free extra columns
// (covariates such as WT). Only evid 0 (observation) and 1 (dose) are
// supported; reset/other codes are rejected up front.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "pmx/common.hpp"

namespace pmx {

struct EventRecord {
  int subject = 1;
  double time = 0.0;
  double amt = 0.0;
  double rate = 0.0;
  double ii = 0.0;
  int evid = 0;
  int cmt = 1;
  int addl = 0;
  int ss = 0;
  double dv = kNaN;              // NaN when missing (".")
  std::size_t origin_row = 0;    // 1-based data row; tie-break and messages
};

struct Dataset {
  // Sorted by (subject, time), ties in original row order.
  std::vector<EventRecord> records;
  // Positions of evid==0 records, ordered by original row.
  std::vector<std::size_t> obs_index;
  // Half-open [begin, end) spans into records, one per subject.
  std::vector<std::pair<std::size_t, std::size_t>> subject_spans;
  std::vector<int> subject_ids;
  // Extra columns, aligned with records.
  std::map<std::string, std::vector<double>> covariates;

  std::size_t n_subjects() const { return subject_spans.size(); }
};

// Validates, sorts and indexes raw records. Covariate vectors must be
// aligned with the records argument (original order).
Dataset make_dataset(std::vector<EventRecord> records,
                     std::map<std::string, std::vector<double>> covariates = {});

Dataset read_dataset_csv(const std::string& path);

// Replaces every dose with addl=k by k+1 doses at time, time+ii, ...,
// time+k*ii. Copies carry addl=0 and ss=0 and inherit origin_row; the
// schedule is re-sorted and re-indexed. Observations are untouched.
Dataset expand_addl(const Dataset& ds);

// Per-subject constant covariate; errors if missing or varying.
double subject_covariate(const Dataset& ds, std::size_t subject_pos, const std::string& name);

void write_dataset_csv(const Dataset& ds, const std::string& path);

}  // namespace pmx

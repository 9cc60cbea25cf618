#include "pmx/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pmx/common.hpp"

namespace pmx {

static std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    std::size_t b = s.find_first_not_of(" \t");
    std::size_t e = s.find_last_not_of(" \t");
    s = (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

CsvTable parse_csv_text(const std::string& text, const std::string& origin) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw ValidationError(origin + ": line " + std::to_string(lineno) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ValidationError(origin + ": empty file");
  return t;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_csv_text(ss.str(), path);
}

std::string format_double(double x) {
  if (std::isnan(x)) return "NA";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf) - 1, x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& context) {
  if (s.empty() || s == "." || s == "NA" || s == "NaN" || s == "nan") {
    return kNaN;
  }
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ValidationError(context + ": cannot parse number '" + s + "'");
  }
  return v;
}

}  // namespace pmx

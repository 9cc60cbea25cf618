#pragma once

#include <string>
#include <vector>

namespace pmx {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // ragged rows rejected at parse
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv_text(const std::string& text, const std::string& origin);

// Shortest round-trip representation (std::to_chars), "NA" for NaN.
std::string format_double(double x);
double parse_double(const std::string& s, const std::string& context);

}  // namespace pmx

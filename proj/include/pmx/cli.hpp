#pragma once

// Command-line front end. The pmx binary is a thin wrapper around cli_main so
// tests can drive every command in-process and capture its streams.
//
// Commands: fit, simulate, ppc, loo, summary.
// Exit codes: 0 ok, 2 validation error, 3 numerical failure, 4 io error.
// Failures print exactly one line to the error stream in the form
//   error[validation|numerical|io]: message

#include <iosfwd>
#include <string>
#include <vector>

namespace pmx {

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pmx

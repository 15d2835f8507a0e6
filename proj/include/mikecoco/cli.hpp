#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mikecoco::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kRuntime = 2;

// Runs one command line (argv[0] is the program name). Errors are reported on
// `err` as a single line starting with "error[validation]" or "error[runtime]".
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace mikecoco::cli

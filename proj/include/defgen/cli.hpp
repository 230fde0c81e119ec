#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace defgen::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;  // contract, parse, schema or numeric error
inline constexpr int kExitIo = 2;
inline constexpr int kExitUsage = 64;

// Environment variable naming a default config file.
inline constexpr const char* kConfigEnv = "DEFGEN_CONFIG";

// argv[0] is the program name. Reports go to out; log records (one JSON
// object per line) and error messages go to err.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace defgen::cli

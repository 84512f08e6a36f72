#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sgfn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Name of the environment variable that overrides the output directory.
inline constexpr const char* kOutputDirEnv = "SGFN_OUTPUT_DIR";

/// Runs the command line given as arguments (without the program name).
/// Human-readable output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sgfn::cli

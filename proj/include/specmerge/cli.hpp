#pragma once

#include <iosfwd>

namespace specmerge::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 1;
inline constexpr int exit_numerical = 2;

/// Entry point of the `specmerge` tool. Subcommands: merge, inspect, sweep,
/// verify, synth. Returns the process exit code; diagnostics go to `err`.
int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

}  // namespace specmerge::cli

#pragma once

#include <iosfwd>

namespace cnncert::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitPartialFailure = 2;
inline constexpr int kExitUsage = 64;
inline constexpr int kExitNoInput = 66;

/// Entry point of the cnncert command line; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cnncert::cli

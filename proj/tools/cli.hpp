#pragma once

#include <iosfwd>

namespace switchbert::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kConfig = 3;
inline constexpr int kFormat = 4;
inline constexpr int kNumeric = 5;
inline constexpr int kFailure = 6;
inline constexpr int kCheckFailed = 7;

/// Runs one subcommand; JSON summary to `out`, logs and usage to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace switchbert::cli

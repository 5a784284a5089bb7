#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cemu {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitMismatch = 3;
inline constexpr int kExitMissing = 4;
inline constexpr int kExitCapability = 5;

/// Entry point of the `cemu` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cemu

#pragma once

#include <iosfwd>

namespace produce {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `produce` tool: synth, train, eval, bench and serve.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

} // namespace produce

#pragma once

#include <string>
#include <vector>

namespace udaseg {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point: `args` excludes the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// Analytic self-checks; prints one PASS/FAIL line per property and returns
/// the number of failures.
int selftest();

}  // namespace udaseg

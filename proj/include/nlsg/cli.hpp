#pragma once

#include <iosfwd>

namespace nlsg {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Entry point of the `nlsg` tool: simulate, fuse, train, evaluate, verify-theorem, report.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nlsg

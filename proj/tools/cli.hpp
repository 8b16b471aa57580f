#pragma once

namespace mkfa {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2, kExitCheckFailed = 3 };

/// Entry point of the `mkfa` command-line tool.
int run_cli(int argc, const char* const* argv);

}  // namespace mkfa

#pragma once

#include <iosfwd>

namespace cnrf {

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitInput = 2, kExitIncompatible = 3 };

/// Entry point of the `cnrf` tool: train, optimize, render, edit, fuse,
/// eval and synth subcommands. Results go to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cnrf

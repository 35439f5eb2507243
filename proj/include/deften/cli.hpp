#pragma once

namespace deften {

// Command-line entry point (subcommands: train, attack, sweep, omniscient,
// landscape, report). Returns the process exit code: 0 on success, 1 on usage
// errors, 2 on data/config errors, 3 on numeric failures.
int run_cli(int argc, const char* const* argv);

}  // namespace deften

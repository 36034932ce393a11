#pragma once

namespace diperf {

// Entry point of the `diperf` tool; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace diperf

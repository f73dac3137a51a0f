#pragma once

#include <iosfwd>
#include <string>

#include "mvfbdsde/config.hpp"
#include "mvfbdsde/solver.hpp"

namespace mvfb {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitRefuted = 2;

/// Runs the configured command and writes its outputs under
/// config.output_dir. Returns 0 (success or verified), 2 (checks ran and the
/// property was refuted) or 1 (operational error).
int run(const ScenarioConfig& config, std::ostream& log);

/// trajectory.csv and ladder.csv for a solve.
void emit_report(const SolveReport& report, const std::string& dir);

/// Command-line entry point used by mvfbdsde_cli.
int cli_main(int argc, char** argv);

}  // namespace mvfb

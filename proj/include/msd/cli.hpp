// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace msd {

/// Runs one subcommand. `args` excludes the program name. Returns the process
/// exit status: 0, or 2/3/4 for usage, data and numeric errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

/// (subcommand, long option names) for every registered subcommand.
std::vector<std::pair<std::string, std::vector<std::string>>> cli_option_table();

} // namespace msd

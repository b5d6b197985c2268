// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace graphfree::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kRuntimeError = 2 };

/// Runs one subcommand. args excludes the program name.
int run(std::span<const std::string> args, std::ostream &out, std::ostream &err);

int main(int argc, char **argv);

} // namespace graphfree::cli

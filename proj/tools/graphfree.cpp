// SPDX-License-Identifier: Apache-2.0
#include "graphfree/cli.hpp"

int main(int argc, char **argv) { return graphfree::cli::main(argc, argv); }

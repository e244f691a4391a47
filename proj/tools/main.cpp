// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/cli.hpp"

int main(int argc, char** argv) { return vrgbx::cli::run(argc, argv); }

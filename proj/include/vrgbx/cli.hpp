// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace vrgbx::cli {

/// Exit codes: 0 success, 1 invalid or unreadable input, 2 usage error,
/// 3 runtime failure such as non-finite values.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args[0] is the program name

/// git-describe style version of the build.
std::string version();

}  // namespace vrgbx::cli

// SPDX-License-Identifier: Apache-2.0
//
// The `nmt` command-line tool. Exit codes: 0 success, 1 usage or parse
// error, 2 runtime failure.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nmt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nmt

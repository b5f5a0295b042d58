#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace egf::tools {

enum ExitCode : int { kPass = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

/// Runs one `egf` invocation. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// EGF_THREADS, default 1.
std::size_t thread_budget();

}  // namespace egf::tools

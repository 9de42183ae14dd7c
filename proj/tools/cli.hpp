#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cmt::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kIo = 3 };

/// Runs `cmt <command> [args]`; `args` excludes the program name. Reports go
/// to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmt::cli

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mic::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2 };

/// Runs one `mic` command. `args` excludes the program name.
/// Subcommands: gen-corpus, train, diagnose, gradcheck, eval.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses "4,8,16" into a strictly increasing list; throws ConfigError.
std::vector<std::size_t> parse_dims(const std::string& text);

}  // namespace mic::cli

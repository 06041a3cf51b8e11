#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace recess::cli {

/// Runs the command line `args` (without the program name). Returns the
/// process exit code: 0 success, 1 user error, 2 runtime failure.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace recess::cli

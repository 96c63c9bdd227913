#pragma once

#include <string>
#include <vector>

namespace weightzoo::cli {

/// Entry point behind the `weightzoo` binary. `args` excludes the program
/// name. Returns 0 on success; on failure prints a single
/// `error:<category>: message` line to stderr and returns a category-specific
/// non-zero code.
int run(const std::vector<std::string>& args);

}  // namespace weightzoo::cli

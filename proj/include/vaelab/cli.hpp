#pragma once

#include <string>
#include <vector>

namespace vaelab::cli {

// Runs one subcommand. Returns 0 on success, 2 on usage errors (with help
// text on stderr), 1 on execution failures.
int dispatch(const std::vector<std::string>& args);

}  // namespace vaelab::cli

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dyna {

/// Command-line front end. `args` excludes the program name. Returns the
/// process exit code: 0 on success, 2 for an invalid config or usage, 1 for
/// a runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dyna

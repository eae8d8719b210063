#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace srunmix::cli {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kData = 3,
};

/// Runs the command line; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace srunmix::cli

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace amoesim {

/// Entry point of the amoesim command-line tool. Returns the process exit
/// status: 0 on success, 1 on audit violations, 2 on usage or config errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace amoesim

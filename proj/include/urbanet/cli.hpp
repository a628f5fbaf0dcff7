#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace urbanet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Runs the command line `args` (args[0] is the program name). Results go to
// `out`, logs and errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace urbanet

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace sapool {

// Exit codes: 0 success, then one per error category.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitFormat = 3,
  kExitDimension = 4,
  kExitSchedule = 5,
  kExitNumeric = 6,
  kExitContract = 7,
};

// Entry point of the `sapool` tool. Results go to `out`; failures print a
// single line `error: <category>: <message>` to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sapool

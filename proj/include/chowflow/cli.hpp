#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace chowflow::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kNumeric = 4,
  kCertificationFailed = 5,
};

/// Runs one command line (without the program name). Never throws; every
/// failure maps onto an ExitCode with a message on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chowflow::cli

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sapool {

// Error categories surfaced by the CLI as a single machine-parseable token.
enum class ErrorCategory { config, format, dimension, schedule, numeric, contract };

std::string_view category_name(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::config, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorCategory::format, w) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorCategory::dimension, w) {}
};
struct ScheduleError : Error {
  explicit ScheduleError(const std::string& w) : Error(ErrorCategory::schedule, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};
// Violated operation precondition that is not a shape problem.
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorCategory::contract, w) {}
};

}  // namespace sapool

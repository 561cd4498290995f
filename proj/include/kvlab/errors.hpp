#pragma once

#include <stdexcept>
#include <string>

namespace kvlab {

/// Bad shapes, infeasible budgets, malformed config values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Softmax row with no allowed entry.
class InvalidMaskError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Event log or ledger that cannot describe a real execution.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

inline void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace detail
}  // namespace kvlab

#pragma once

#include <stdexcept>
#include <string>

namespace odcl {

// Caller broke a documented precondition (bad shapes, empty inputs, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A computation produced NaN/Inf or diverged; message names the failing op.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A requested artifact (component, checkpoint, file) does not exist.
struct NotFoundError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace odcl

#pragma once

#include <stdexcept>
#include <string>

namespace gflowstate {

// Precondition violated by the caller (bad state, bad range, bad parameter).
class DomainError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// The operation exists but cannot run on this input size or environment.
class CapabilityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Persistence failure or schema mismatch.
class StoreError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace gflowstate

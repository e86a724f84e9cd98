#pragma once

#include <stdexcept>
#include <string>

namespace histosynth {

/// Input violates a documented precondition or file schema.
class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A requested resource (synthetic pool, checkpoint, split) cannot satisfy the request.
class ResourceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace histosynth

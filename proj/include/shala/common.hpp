#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

namespace shala {

using json = nlohmann::json;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed specs, configs and flags. Maps to exit code 2 at the CLI.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A classifier failed its accuracy gate.
class GateFailure : public Error {
 public:
  using Error::Error;
};

class DigestMismatch : public Error {
 public:
  using Error::Error;
};

class FormatVersionMismatch : public Error {
 public:
  using Error::Error;
};

enum class Activation { relu, silu, identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

}  // namespace shala

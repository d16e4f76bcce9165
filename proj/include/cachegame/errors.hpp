#pragma once

#include <stdexcept>
#include <string>

namespace cachegame {

/// Invalid geometry, environment or experiment configuration.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// An argument outside the domain of an operation (e.g. an address outside
/// the owner's range).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Operation issued in the wrong lifecycle state (stepping a finished episode).
class StateError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Shape or contract mismatch between components.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Non-finite loss or similar numerical failure during training.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Report construction over empty or inconsistent inputs.
class ReportError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace cachegame

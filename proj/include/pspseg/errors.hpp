#pragma once

#include <stdexcept>
#include <string>

namespace pspseg {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated API contract: non-scalar loss, stale tape, bad argument.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Illegal branch state transition (mask a pruned branch, restore an active one, ...).
class LifecycleError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace pspseg

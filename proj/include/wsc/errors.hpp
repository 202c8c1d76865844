#ifndef WSC_ERRORS_HPP
#define WSC_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace wsc {

// Root of all library errors; the CLI maps subtrees to exit codes.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// --- bias kernel ---
class NoSdSource : public Error {
public:
  using Error::Error;
};
class DegenerateStatistic : public Error {
public:
  using Error::Error;
};
class NonPositiveSd : public Error {
public:
  using Error::Error;
};
class InvalidSampleSize : public Error {
public:
  using Error::Error;
};

// --- dataset / config validation ---
class ValidationError : public Error {
public:
  using Error::Error;
};
class SchemaError : public ValidationError {
public:
  using ValidationError::ValidationError;
};
class RowError : public ValidationError {
public:
  RowError(std::size_t row, const std::string& msg)
      : ValidationError("row " + std::to_string(row) + ": " + msg), row_(row) {}
  std::size_t row() const { return row_; }

private:
  std::size_t row_;
};
class ReferentialError : public ValidationError {
public:
  using ValidationError::ValidationError;
};
class ConfigError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

// --- I/O ---
class IoError : public Error {
public:
  using Error::Error;
};

// --- numerical engines ---
class NonConvergence : public Error {
public:
  using Error::Error;
};
class SingularDesign : public Error {
public:
  using Error::Error;
};
class TooFewClusters : public Error {
public:
  using Error::Error;
};
class NotPositiveDefinite : public Error {
public:
  using Error::Error;
};
class NotConverged : public Error {
public:
  using Error::Error;
};
class NumericalFailure : public Error {
public:
  using Error::Error;
};
class NonFinite : public Error {
public:
  using Error::Error;
};

}  // namespace wsc

#endif

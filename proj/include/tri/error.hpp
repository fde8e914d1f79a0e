#pragma once

#include <stdexcept>
#include <string>

namespace tri {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Invalid WorldSpec / Scenario; the message names the violated invariant.
class SpecError : public Error {
public:
  using Error::Error;
};

class DomainError : public Error {
public:
  using Error::Error;
};

/// Raised when the task score cannot be formed. `category()` carries the
/// failure-taxonomy label (currently always "Lexicalization failure").
class ScoringError : public Error {
public:
  ScoringError(std::string category, const std::string& what)
      : Error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

private:
  std::string category_;
};

// Patch source and base circuits disagree in flattened dimension and no
// translation map was supplied.
class TypeIncompatibleError : public Error {
public:
  using Error::Error;
};

class FitError : public Error {
public:
  using Error::Error;
};

class LeakageError : public Error {
public:
  using Error::Error;
};

class SamplingError : public Error {
public:
  using Error::Error;
};

class CalibrationError : public Error {
public:
  using Error::Error;
};

class NumericalError : public Error {
public:
  using Error::Error;
};

class DegenerateWorldError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

/// Pipeline stage failure; carries the stage name and the seed needed to
/// replay it.
class StageError : public Error {
public:
  StageError(std::string stage, unsigned long long seed, const std::string& what)
      : Error("stage '" + stage + "' failed (replay seed " + std::to_string(seed) + "): " + what),
        stage_(std::move(stage)), seed_(seed) {}
  const std::string& stage() const noexcept { return stage_; }
  unsigned long long seed() const noexcept { return seed_; }

private:
  std::string stage_;
  unsigned long long seed_;
};

} // namespace tri

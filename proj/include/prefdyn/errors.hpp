#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefdyn {

// Thrown by reg_gradient when the hinge is active but a log-prob gradient has
// (near) zero norm, i.e. the policy is close to deterministic on that prompt.
class DegenerateGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A term of the penalized objective produced a NaN or infinity. `term` is the
// letter of the offending gradient term: a/c (margin), b/d (SFT), e (reg).
class NonFiniteGradientError : public std::runtime_error {
 public:
  NonFiniteGradientError(char term, const std::string& what)
      : std::runtime_error(what), term_(term) {}
  char term() const noexcept { return term_; }

 private:
  char term_;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SearchExhaustedError : public GenerationError {
 public:
  using GenerationError::GenerationError;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace prefdyn

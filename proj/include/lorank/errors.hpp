#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lorank {

// Every error carries a short machine-readable kind used by the CLI prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error("domain", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct UnknownParameterError : Error {
  explicit UnknownParameterError(const std::string& name)
      : Error("unknown-parameter", "parameter not on tape: " + name) {}
};
struct TrainingError : Error {
  TrainingError(const std::string& w, std::size_t step)
      : Error("training", w + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};
struct SchemaError : Error {
  explicit SchemaError(const std::string& w) : Error("schema", w) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error("parse", w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

}  // namespace lorank

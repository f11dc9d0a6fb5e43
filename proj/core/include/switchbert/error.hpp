#pragma once

#include <stdexcept>
#include <string>

namespace switchbert {

/// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  Dimension,
  Contract,
  Numeric,
  DegenerateInput,
  Oracle,
  Config,
  Format,
  Corruption,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define SWITCHBERT_DEFINE_ERROR(Name, Kind)                           \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Kind, what) {}     \
  }

SWITCHBERT_DEFINE_ERROR(DimensionError, ErrorKind::Dimension);
SWITCHBERT_DEFINE_ERROR(ContractError, ErrorKind::Contract);
SWITCHBERT_DEFINE_ERROR(NumericError, ErrorKind::Numeric);
SWITCHBERT_DEFINE_ERROR(DegenerateInputError, ErrorKind::DegenerateInput);
SWITCHBERT_DEFINE_ERROR(OracleError, ErrorKind::Oracle);
SWITCHBERT_DEFINE_ERROR(ConfigError, ErrorKind::Config);
SWITCHBERT_DEFINE_ERROR(FormatError, ErrorKind::Format);
SWITCHBERT_DEFINE_ERROR(CorruptionError, ErrorKind::Corruption);
SWITCHBERT_DEFINE_ERROR(IoError, ErrorKind::Io);

#undef SWITCHBERT_DEFINE_ERROR

}  // namespace switchbert

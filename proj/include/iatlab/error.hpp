// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace iat {

/// Error categories. Each maps to a distinct CLI exit code.
enum class ErrorKind {
  dimension,
  numeric,
  config,
  data,
  contract,
  checkpoint,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::contract: return "contract";
    case ErrorKind::checkpoint: return "checkpoint";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define IAT_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

IAT_DEFINE_ERROR(DimensionError, dimension)
IAT_DEFINE_ERROR(NumericError, numeric)
IAT_DEFINE_ERROR(ConfigError, config)
IAT_DEFINE_ERROR(DataError, data)
IAT_DEFINE_ERROR(ContractError, contract)
IAT_DEFINE_ERROR(CheckpointError, checkpoint)
IAT_DEFINE_ERROR(IoError, io)

#undef IAT_DEFINE_ERROR

}  // namespace iat

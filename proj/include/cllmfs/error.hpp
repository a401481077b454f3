// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cllmfs {

enum class ErrorKind {
  dimension,
  config,
  index,
  length,
  degenerate,
  contract,
  io,
  data,
  parse,
  oracle,
  sampling,
  numeric,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; `kind()` drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit code for an error: 2 I/O, 3 data, 4 config, 1 everything else.
int exit_code_for(ErrorKind kind);

}  // namespace cllmfs

#pragma once

#include <stdexcept>
#include <string>

namespace semtomo {

// Bad configuration / arguments: maps to CLI exit code 2.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent input data: maps to CLI exit code 2.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace semtomo

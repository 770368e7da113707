#pragma once

#include <stdexcept>
#include <string>

namespace cytogate {

enum class ErrorKind {
  io,
  format,
  dimension_mismatch,
  unknown_channel,
  out_of_bounds,
  invalid_argument,
  syntax,
  undefined_group,
  unknown_class,
  missing_stain,
  exclusivity_violation,
  too_many_stains,
  infeasible,
  divergence,
};

const char* to_string(ErrorKind kind);

/// All library failures surface as this exception; `kind()` lets callers
/// branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace cytogate

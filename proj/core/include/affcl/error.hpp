#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace affcl {

enum class ErrorKind {
  InputShape,
  NumericInput,
  EmptySupport,
  EmptyBatch,
  LabelDomain,
  WeightDomain,
  DegenerateBatch,
  ManifestMismatch,
  DegenerateAggregation,
  Format,
  Integrity,
  Capacity,
  IncompleteMatrix,
  EmptyIndexSet,
  Config,
  Inventory,
  Io,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so callers (and the CLI's
/// exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace affcl

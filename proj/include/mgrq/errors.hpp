#pragma once

#include <stdexcept>
#include <string>

namespace mgrq {

// File and container problems: missing files, wrong magic, short payloads.
enum class DataErrorKind {
  kNotFound,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kCorrupt,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

// NaN or Inf where a finite value is required, e.g. diverged training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mgrq

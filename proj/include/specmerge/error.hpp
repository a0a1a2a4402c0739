#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace specmerge {

/// Base for every error raised by the toolkit. The CLI maps subclasses to
/// exit codes (numerical_error -> 2, everything else -> 1).
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed interchange header or layout. Carries the byte offset into the
/// file where the problem was detected.
class format_error : public error {
 public:
  format_error(const std::string &what, std::uint64_t byte_offset)
      : error(what + " (at byte " + std::to_string(byte_offset) + ")"), offset_(byte_offset) {}

  std::uint64_t byte_offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Data that parses but violates an invariant (non-finite element, bad score).
class validation_error : public error {
 public:
  using error::error;
};

/// Unreadable/unwritable path or truncated data block.
class io_error : public error {
 public:
  using error::error;
};

/// Key-set or per-tensor shape mismatch between collections.
class shape_error : public error {
 public:
  using error::error;
};

/// Out-of-range parameter to an operation.
class argument_error : public error {
 public:
  using error::error;
};

/// Input for which the operation is undefined (e.g. rank selection on an
/// all-zero spectrum).
class degenerate_input_error : public argument_error {
 public:
  using argument_error::argument_error;
};

/// SVD did not converge or produced non-finite output.
class numerical_error : public error {
 public:
  using error::error;
};

}  // namespace specmerge

#pragma once

#include <stdexcept>
#include <string>

namespace bitivf {

// Bad caller input: shape mismatch, out-of-range parameter, unknown id.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// External data that violates a type invariant (NaN/Inf in vectors).
class InvalidData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Index file that cannot be trusted: bad magic/version, truncation, CRC.
class CorruptIndex : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed fvecs/bvecs/ivecs input. Message carries the byte offset.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Broken internal consistency, e.g. an index referencing an id that the
// raw vector store does not hold.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace bitivf

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace groundkit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A query token that is not part of the vocabulary.
class OovError : public Error {
 public:
  explicit OovError(std::string token)
      : Error("OOV: unknown word '" + token + "'"), token_(std::move(token)) {}

  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

/// Raised when a query scene cannot host the requested split.
class NoValidBinding : public Error {
 public:
  NoValidBinding() : Error("no valid binding") {}
};

/// Malformed tag structure.
class StructureError : public Error {
 public:
  using Error::Error;
};

}  // namespace groundkit

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace phylotopo {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (Newick, FASTA, CSV). Carries the byte offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " at position " + std::to_string(position)), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Input violates a documented precondition (bad sizes, unknown taxa, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Some site has probability zero under the given tree and branch lengths.
class ZeroLikelihood : public Error {
 public:
  using Error::Error;
};

/// A tree, split or subsplit is not covered by the SBN support.
class OutOfSupport : public Error {
 public:
  using Error::Error;
};

/// Features handed to topology reconstruction are not a valid embedding.
class AmbiguousEmbedding : public Error {
 public:
  using Error::Error;
};

}  // namespace phylotopo

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wstab {

enum class Errc {
  MalformedHtml,
  SpanOutOfVocab,
  IllFormedSequence,
  TooLong,
  ShapeMismatch,
  IdOutOfRange,
  EmptyAfterIgnore,
  NotScalar,
  CellCountMismatch,
  Misaligned,
  DatasetEmpty,
  DecodeError,
  BadMagic,
  TruncatedFile,
  ConfigMismatch,
  FileNotFound,
  DuplicateId,
  Unsatisfiable,
  Overflow,
  InvalidConfig,
  Io,
};

std::string_view errc_name(Errc code) noexcept;

// Every failure the library reports is an Error carrying one of the codes
// above, so callers (CLI, bindings, tests) can branch on the kind.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace wstab

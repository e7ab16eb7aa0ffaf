#include "wstab/error.hpp"

namespace wstab {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::MalformedHtml: return "MalformedHtml";
    case Errc::SpanOutOfVocab: return "SpanOutOfVocab";
    case Errc::IllFormedSequence: return "IllFormedSequence";
    case Errc::TooLong: return "TooLong";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::IdOutOfRange: return "IdOutOfRange";
    case Errc::EmptyAfterIgnore: return "EmptyAfterIgnore";
    case Errc::NotScalar: return "NotScalar";
    case Errc::CellCountMismatch: return "CellCountMismatch";
    case Errc::Misaligned: return "Misaligned";
    case Errc::DatasetEmpty: return "DatasetEmpty";
    case Errc::DecodeError: return "DecodeError";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::ConfigMismatch: return "ConfigMismatch";
    case Errc::FileNotFound: return "FileNotFound";
    case Errc::DuplicateId: return "DuplicateId";
    case Errc::Unsatisfiable: return "Unsatisfiable";
    case Errc::Overflow: return "Overflow";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace wstab

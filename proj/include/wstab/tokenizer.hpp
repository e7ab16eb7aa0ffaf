#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wstab/table_model.hpp"

namespace wstab {

using TokenSeq = std::vector<int>;

// Control ids shared by both vocabularies.
inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

/// Bijective token <-> id table. Ids are dense from 0 and `<pad>` is 0.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // throws IdOutOfRange if absent
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; line number is the id.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Structure vocabulary: tag-level tokens, merged `<td></td>`, and the
/// decomposed spanning-cell form `<td` `rowspan=`/`colspan=` N `>`.
class StructVocab {
 public:
  static constexpr int kMaxSpan = 10;

  static const StructVocab& standard();

  const Vocab& vocab() const { return vocab_; }
  std::size_t size() const { return vocab_.size(); }

  int thead_open, thead_close, tbody_open, tbody_close, tr_open, tr_close;
  int td_cell, td_open, td_gt, td_close, rowspan_kw, colspan_kw;
  int number(int span) const;             // id of the numeric token "2".."10"
  std::optional<int> span_value(int id) const;  // inverse of number()
  bool is_cell_token(int id) const { return id == td_cell || id == td_open; }

 private:
  StructVocab();
  Vocab vocab_;
};

/// Character-level vocabulary over a configured alphabet.
class CellVocab {
 public:
  explicit CellVocab(std::string_view alphabet);

  const Vocab& vocab() const { return vocab_; }
  std::size_t size() const { return vocab_.size(); }
  const std::string& alphabet() const { return alphabet_; }
  std::optional<int> char_id(char c) const;

 private:
  std::string alphabet_;
  Vocab vocab_;
  int by_char_[256];
};

struct StructTokenizeOptions {
  bool strict = true;               // span > 10 -> SpanOutOfVocab; otherwise clamped
  std::optional<std::size_t> max_len;  // TooLong when exceeded (counting <eos>)
};

TokenSeq tokenize_structure(const TableTree& tree, const StructVocab& vocab = StructVocab::standard(),
                            const StructTokenizeOptions& options = {});

enum class DetokenizeMode { Strict, Repair };

/// Rebuilds the skeleton (empty cell contents). In repair mode every cell
/// token yields exactly one cell, in order, so cell texts can be attached by
/// index.
TableTree detokenize_structure(std::span<const int> seq, const StructVocab& vocab = StructVocab::standard(),
                               DetokenizeMode mode = DetokenizeMode::Strict);

std::size_t count_cell_tokens(std::span<const int> seq, const StructVocab& vocab = StructVocab::standard());

struct CellTokenizeResult {
  TokenSeq ids;
  std::size_t unknown = 0;  // characters mapped to <unk>
};

CellTokenizeResult tokenize_cell(std::string_view text, const CellVocab& vocab,
                                 std::optional<std::size_t> max_len = std::nullopt);
std::string detokenize_cell(std::span<const int> seq, const CellVocab& vocab);

/// Space-separated token listing, for debugging.
std::string render_tokens(std::span<const int> seq, const Vocab& vocab);

}  // namespace wstab

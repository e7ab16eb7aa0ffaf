#include "wstab/tokenizer.hpp"

#include <fstream>

#include "wstab/error.hpp"

namespace wstab {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) throw Error(Errc::InvalidConfig, "duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(Errc::IdOutOfRange, "token id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw Error(Errc::IdOutOfRange, "unknown token '" + std::string(token) + "'");
  return *found;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::FileNotFound, path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocab(std::move(tokens));
}

namespace {

std::vector<std::string> struct_tokens() {
  std::vector<std::string> t = {"<pad>", "<sos>",     "<eos>", "<unk>", "<thead>", "</thead>",
                                "<tbody>", "</tbody>", "<tr>",  "</tr>", "<td></td>", "<td",
                                ">",       "</td>",    "rowspan=", "colspan="};
  for (int n = 2; n <= StructVocab::kMaxSpan; ++n) t.push_back(std::to_string(n));
  return t;
}

std::vector<std::string> cell_tokens(std::string_view alphabet) {
  std::vector<std::string> t = {"<pad>", "<sos>", "<eos>", "<unk>"};
  for (char c : alphabet) t.emplace_back(1, c);
  return t;
}

}  // namespace

StructVocab::StructVocab() : vocab_(struct_tokens()) {
  thead_open = vocab_.id("<thead>");
  thead_close = vocab_.id("</thead>");
  tbody_open = vocab_.id("<tbody>");
  tbody_close = vocab_.id("</tbody>");
  tr_open = vocab_.id("<tr>");
  tr_close = vocab_.id("</tr>");
  td_cell = vocab_.id("<td></td>");
  td_open = vocab_.id("<td");
  td_gt = vocab_.id(">");
  td_close = vocab_.id("</td>");
  rowspan_kw = vocab_.id("rowspan=");
  colspan_kw = vocab_.id("colspan=");
}

const StructVocab& StructVocab::standard() {
  static const StructVocab instance;
  return instance;
}

int StructVocab::number(int span) const {
  if (span < 2 || span > kMaxSpan) throw Error(Errc::SpanOutOfVocab, "span " + std::to_string(span));
  return vocab_.id(std::to_string(span));
}

std::optional<int> StructVocab::span_value(int id) const {
  int first = vocab_.id("2");
  if (id >= first && id < first + kMaxSpan - 1) return id - first + 2;
  return std::nullopt;
}

CellVocab::CellVocab(std::string_view alphabet) : alphabet_(alphabet), vocab_(cell_tokens(alphabet)) {
  std::fill(std::begin(by_char_), std::end(by_char_), -1);
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    by_char_[static_cast<unsigned char>(alphabet_[i])] = static_cast<int>(i) + 4;
  }
}

std::optional<int> CellVocab::char_id(char c) const {
  int id = by_char_[static_cast<unsigned char>(c)];
  if (id < 0) return std::nullopt;
  return id;
}

TokenSeq tokenize_structure(const TableTree& tree, const StructVocab& v, const StructTokenizeOptions& options) {
  TokenSeq seq;
  auto emit_span = [&](int keyword, int span) {
    if (span <= 1) return;
    if (span > StructVocab::kMaxSpan) {
      if (options.strict) throw Error(Errc::SpanOutOfVocab, "span " + std::to_string(span) + " exceeds vocabulary");
      span = StructVocab::kMaxSpan;
    }
    seq.push_back(keyword);
    seq.push_back(v.number(span));
  };

  for (const auto& section : tree.root.children) {
    bool head = section.tag == Tag::Thead;
    seq.push_back(head ? v.thead_open : v.tbody_open);
    for (const auto& tr : section.children) {
      seq.push_back(v.tr_open);
      for (const auto& td : tr.children) {
        if (td.rowspan == 1 && td.colspan == 1) {
          seq.push_back(v.td_cell);
          continue;
        }
        seq.push_back(v.td_open);
        emit_span(v.rowspan_kw, td.rowspan);
        emit_span(v.colspan_kw, td.colspan);
        seq.push_back(v.td_gt);
        seq.push_back(v.td_close);
      }
      seq.push_back(v.tr_close);
    }
    seq.push_back(head ? v.thead_close : v.tbody_close);
  }
  seq.push_back(kEos);
  if (options.max_len && seq.size() > *options.max_len) {
    throw Error(Errc::TooLong, "structure sequence of " + std::to_string(seq.size()) + " tokens exceeds " +
                                   std::to_string(*options.max_len));
  }
  return seq;
}

namespace {

class SequenceBuilder {
 public:
  SequenceBuilder(const StructVocab& v, bool repair) : v_(v), repair_(repair) { tree_.root.tag = Tag::Table; }

  void feed(int id, std::size_t pos) {
    pos_ = pos;
    if (pending_) {
      if (handle_pending(id)) return;
    }
    if (id == v_.thead_open || id == v_.tbody_open) {
      if (section_) {
        if (!repair_) fail("section opened inside another section");
        close_section();
      }
      open_section(id == v_.thead_open ? Tag::Thead : Tag::Tbody);
    } else if (id == v_.thead_close || id == v_.tbody_close) {
      Tag want = id == v_.thead_close ? Tag::Thead : Tag::Tbody;
      if (!section_ || section_->tag != want || row_) {
        if (!repair_) fail("unbalanced section close");
        if (section_ && section_->tag == want) close_section();
        return;
      }
      close_section();
    } else if (id == v_.tr_open) {
      if (!section_ || row_) {
        if (!repair_) fail("<tr> outside a section or inside a row");
        if (row_) row_ = nullptr;
        if (!section_) open_section(Tag::Tbody);
      }
      section_->children.push_back(TableNode{Tag::Tr, 1, 1, {}, {}});
      row_ = &section_->children.back();
    } else if (id == v_.tr_close) {
      if (!row_) {
        if (!repair_) fail("</tr> without <tr>");
        return;
      }
      row_ = nullptr;
    } else if (id == v_.td_cell || id == v_.td_open) {
      if (!row_) {
        if (!repair_) fail("cell outside <tr>");
        ensure_row();
      }
      row_->children.push_back(TableNode{Tag::Td, 1, 1, {}, {}});
      if (id == v_.td_open) {
        pending_ = true;
        stage_ = Stage::Attrs;
        keyword_ = -1;
        seen_row_ = seen_col_ = false;
      }
    } else if (id == kPad || id == kSos || id == kUnk) {
      if (!repair_) fail("control token inside sequence");
    } else {
      // '>', '</td>', keywords or numbers outside a pending cell
      if (!repair_) fail("token '" + v_.vocab().token(id) + "' outside a spanning cell");
    }
  }

  TableTree finish() {
    if (pending_ && !repair_) fail("unterminated spanning cell");
    if ((row_ || section_) && !repair_) fail("unclosed tags at end of sequence");
    return std::move(tree_);
  }

 private:
  enum class Stage { Attrs, Number, Close };

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(Errc::IllFormedSequence, msg + " at position " + std::to_string(pos_));
  }

  // Returns true if the token was consumed by the spanning-cell sub-grammar.
  bool handle_pending(int id) {
    TableNode& td = row_->children.back();
    switch (stage_) {
      case Stage::Attrs:
        if (id == v_.rowspan_kw || id == v_.colspan_kw) {
          bool row = id == v_.rowspan_kw;
          if ((row && seen_row_) || (!row && seen_col_)) {
            if (!repair_) fail("duplicate span attribute");
          }
          keyword_ = id;
          stage_ = Stage::Number;
          return true;
        }
        if (id == v_.td_gt) {
          stage_ = Stage::Close;
          return true;
        }
        break;
      case Stage::Number:
        if (auto span = v_.span_value(id)) {
          if (keyword_ == v_.rowspan_kw) {
            td.rowspan = *span;
            seen_row_ = true;
          } else {
            td.colspan = *span;
            seen_col_ = true;
          }
          stage_ = Stage::Attrs;
          return true;
        }
        if (!repair_) fail("span keyword not followed by a number");
        stage_ = Stage::Attrs;
        return handle_pending(id);
      case Stage::Close:
        if (id == v_.td_close) {
          pending_ = false;
          return true;
        }
        break;
    }
    if (!repair_) fail("malformed spanning cell");
    // Repair: the cell ends implicitly; the token is handled normally unless it
    // only makes sense inside a cell.
    pending_ = false;
    return id == v_.td_gt || id == v_.td_close || id == v_.rowspan_kw || id == v_.colspan_kw ||
           v_.span_value(id).has_value();
  }

  void open_section(Tag tag) {
    tree_.root.children.push_back(TableNode{tag, 1, 1, {}, {}});
    section_ = &tree_.root.children.back();
    row_ = nullptr;
  }

  void close_section() {
    section_ = nullptr;
    row_ = nullptr;
  }

  void ensure_row() {
    if (!section_) open_section(Tag::Tbody);
    section_->children.push_back(TableNode{Tag::Tr, 1, 1, {}, {}});
    row_ = &section_->children.back();
  }

  const StructVocab& v_;
  bool repair_;
  TableTree tree_;
  TableNode* section_ = nullptr;
  TableNode* row_ = nullptr;
  bool pending_ = false;
  Stage stage_ = Stage::Attrs;
  int keyword_ = -1;
  bool seen_row_ = false;
  bool seen_col_ = false;
  std::size_t pos_ = 0;
};

}  // namespace

TableTree detokenize_structure(std::span<const int> seq, const StructVocab& vocab, DetokenizeMode mode) {
  bool repair = mode == DetokenizeMode::Repair;
  SequenceBuilder builder(vocab, repair);
  std::size_t i = 0;
  for (; i < seq.size(); ++i) {
    int id = seq[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      if (!repair) throw Error(Errc::IllFormedSequence, "token id " + std::to_string(id) + " out of vocabulary");
      continue;
    }
    if (id == kEos) break;
    if (id == kPad && !repair) {
      // trailing padding is allowed; anything after it is not
      for (std::size_t j = i; j < seq.size(); ++j) {
        if (seq[j] != kPad) throw Error(Errc::IllFormedSequence, "token after <pad>");
      }
      break;
    }
    builder.feed(id, i);
  }
  if (!repair && i < seq.size() && seq[i] == kEos) {
    for (std::size_t j = i + 1; j < seq.size(); ++j) {
      if (seq[j] != kPad) throw Error(Errc::IllFormedSequence, "token after <eos>");
    }
  }
  return builder.finish();
}

std::size_t count_cell_tokens(std::span<const int> seq, const StructVocab& vocab) {
  std::size_t n = 0;
  for (int id : seq) {
    if (id == kEos) break;
    if (vocab.is_cell_token(id)) ++n;
  }
  return n;
}

CellTokenizeResult tokenize_cell(std::string_view text, const CellVocab& vocab, std::optional<std::size_t> max_len) {
  CellTokenizeResult out;
  out.ids.reserve(text.size() + 1);
  for (char c : text) {
    if (auto id = vocab.char_id(c)) {
      out.ids.push_back(*id);
    } else {
      out.ids.push_back(kUnk);
      ++out.unknown;
    }
  }
  out.ids.push_back(kEos);
  if (max_len && out.ids.size() > *max_len) {
    throw Error(Errc::TooLong, "cell sequence of " + std::to_string(out.ids.size()) + " tokens exceeds " +
                                   std::to_string(*max_len));
  }
  return out;
}

std::string detokenize_cell(std::span<const int> seq, const CellVocab& vocab) {
  std::string out;
  for (int id : seq) {
    if (id == kEos) break;
    if (id < 4 || static_cast<std::size_t>(id) >= vocab.size()) continue;
    out += vocab.alphabet()[static_cast<std::size_t>(id - 4)];
  }
  return out;
}

std::string render_tokens(std::span<const int> seq, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(seq[i]);
  }
  return out;
}

}  // namespace wstab

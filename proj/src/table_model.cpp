#include "wstab/table_model.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <optional>

#include "wstab/error.hpp"

namespace wstab {

std::string_view tag_name(Tag tag) noexcept {
  switch (tag) {
    case Tag::Table: return "table";
    case Tag::Thead: return "thead";
    case Tag::Tbody: return "tbody";
    case Tag::Tr: return "tr";
    case Tag::Td: return "td";
  }
  return "?";
}

namespace {

std::size_t count_nodes(const TableNode& node) {
  std::size_t n = node.content.empty() ? 1 : 2;
  for (const auto& child : node.children) n += count_nodes(child);
  return n;
}

template <class NodeT, class Out>
void collect_cells(NodeT& node, Out& out) {
  if (node.tag == Tag::Td) {
    out.push_back(&node);
    return;
  }
  for (auto& child : node.children) collect_cells(child, out);
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f'; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<Tag> tag_from_name(std::string_view name) {
  if (name == "table") return Tag::Table;
  if (name == "thead") return Tag::Thead;
  if (name == "tbody") return Tag::Tbody;
  if (name == "tr") return Tag::Tr;
  if (name == "td") return Tag::Td;
  return std::nullopt;
}

std::string decode_entities(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '&') {
      auto rest = text.substr(i);
      if (rest.starts_with("&amp;")) { out += '&'; i += 4; continue; }
      if (rest.starts_with("&lt;")) { out += '<'; i += 3; continue; }
      if (rest.starts_with("&gt;")) { out += '>'; i += 3; continue; }
      if (rest.starts_with("&quot;")) { out += '"'; i += 5; continue; }
    }
    out += text[i];
  }
  return out;
}

void encode_entities(std::string_view text, std::string& out) {
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
}

struct RawTag {
  bool closing = false;
  std::string name;
  std::vector<std::pair<std::string, std::string>> attrs;
  bool self_closing = false;
};

class Parser {
 public:
  Parser(std::string_view src, ParseMode mode) : src_(src), repair_(mode == ParseMode::Repair) {}

  TableTree run() {
    TableTree tree;
    tree.root.tag = Tag::Table;
    stack_.push_back(&tree.root);
    bool table_open = false;
    bool table_closed = false;

    while (pos_ < src_.size()) {
      if (src_[pos_] != '<') {
        std::size_t end = src_.find('<', pos_);
        if (end == std::string_view::npos) end = src_.size();
        on_text(src_.substr(pos_, end - pos_), table_open && !table_closed);
        pos_ = end;
        continue;
      }
      auto raw = read_tag();
      if (!raw) break;  // repair mode: unterminated tag at end of input
      if (table_closed) {
        if (repair_) continue;
        fail("content after </table>");
      }
      auto tag = tag_from_name(raw->name);
      if (!table_open) {
        if (tag == Tag::Table && !raw->closing) {
          check_no_attrs(*raw);
          table_open = true;
          continue;
        }
        if (!repair_) fail("expected <table>");
        table_open = true;
        // fall through and place the tag inside the implicit table
      }
      if (!tag) {
        if (!repair_) fail("unknown tag <" + raw->name + ">");
        continue;
      }
      if (raw->self_closing && !repair_) fail("self-closing tag <" + raw->name + "/>");
      if (raw->closing) {
        if (*tag == Tag::Table) {
          if (!repair_ && stack_.size() != 1) fail("</table> with open children");
          stack_.resize(1);
          table_closed = true;
        } else {
          on_close(*tag);
        }
      } else {
        on_open(*tag, *raw);
        if (raw->self_closing && *tag == Tag::Td) pop();
      }
    }
    if (!repair_) {
      if (!table_open) fail("missing <table>");
      if (!table_closed) fail("unclosed <table>");
    }
    return tree;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(Errc::MalformedHtml, msg + " at offset " + std::to_string(pos_));
  }

  TableNode& top() { return *stack_.back(); }
  void pop() { stack_.pop_back(); }

  void push_child(Tag tag) {
    auto& parent = top();
    parent.children.push_back(TableNode{tag, 1, 1, {}, {}});
    stack_.push_back(&parent.children.back());
  }

  // Pops until the top node has the given tag. Returns false (and leaves the
  // stack untouched) when no such node is open.
  bool close_to(Tag tag) {
    auto it = std::find_if(stack_.rbegin(), stack_.rend(), [&](auto* n) { return n->tag == tag; });
    if (it == stack_.rend()) return false;
    stack_.resize(static_cast<std::size_t>(stack_.rend() - it));
    return true;
  }

  bool is_open(Tag tag) const {
    return std::any_of(stack_.begin(), stack_.end(), [&](auto* n) { return n->tag == tag; });
  }

  void on_text(std::string_view text, bool inside_table) {
    if (!stack_.empty() && top().tag == Tag::Td) {
      top().content += decode_entities(text);
      return;
    }
    if (repair_) return;
    if (std::all_of(text.begin(), text.end(), is_space)) return;
    if (!inside_table) fail("text outside <table>");
    fail("text outside a cell");
  }

  void on_open(Tag tag, const RawTag& raw) {
    if (tag != Tag::Td) check_no_attrs(raw);
    switch (tag) {
      case Tag::Table:
        if (!repair_) fail("nested <table>");
        return;
      case Tag::Thead:
      case Tag::Tbody:
        if (top().tag != Tag::Table) {
          if (!repair_) fail("<" + raw.name + "> must be a child of <table>");
          stack_.resize(1);
        }
        push_child(tag);
        return;
      case Tag::Tr:
        if (top().tag != Tag::Thead && top().tag != Tag::Tbody) {
          if (!repair_) fail("<tr> outside <thead>/<tbody>");
          if (!close_to(Tag::Thead) && !close_to(Tag::Tbody)) {
            stack_.resize(1);
            push_child(Tag::Tbody);
          }
        }
        push_child(Tag::Tr);
        return;
      case Tag::Td: {
        if (top().tag != Tag::Tr) {
          if (!repair_) fail("<td> outside <tr>");
          if (!close_to(Tag::Tr)) {
            if (!close_to(Tag::Thead) && !close_to(Tag::Tbody)) {
              stack_.resize(1);
              push_child(Tag::Tbody);
            }
            push_child(Tag::Tr);
          }
        }
        push_child(Tag::Td);
        apply_span_attrs(raw, top());
        return;
      }
    }
  }

  void on_close(Tag tag) {
    if (!repair_) {
      if (top().tag != tag) {
        fail("</" + std::string(tag_name(tag)) + "> does not match <" + std::string(tag_name(top().tag)) + ">");
      }
      pop();
      return;
    }
    if (is_open(tag)) close_to(tag), pop();
  }

  void check_no_attrs(const RawTag& raw) const {
    if (!raw.attrs.empty() && !repair_) fail("unexpected attribute on <" + raw.name + ">");
  }

  void apply_span_attrs(const RawTag& raw, TableNode& td) {
    bool seen_row = false, seen_col = false;
    for (const auto& [key, value] : raw.attrs) {
      bool is_row = key == "rowspan";
      bool is_col = key == "colspan";
      if (!is_row && !is_col) {
        if (!repair_) fail("unsupported attribute '" + key + "'");
        continue;
      }
      if ((is_row && seen_row) || (is_col && seen_col)) {
        if (!repair_) fail("duplicate attribute '" + key + "'");
        continue;
      }
      int span = 0;
      auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), span);
      bool ok = ec == std::errc() && ptr == value.data() + value.size() && !value.empty();
      if (!ok || span < 1) {
        if (!repair_) fail("invalid " + key + " value '" + value + "'");
        span = 1;
      }
      (is_row ? td.rowspan : td.colspan) = span;
      (is_row ? seen_row : seen_col) = true;
    }
  }

  void skip_space() {
    while (pos_ < src_.size() && is_space(src_[pos_])) ++pos_;
  }

  // Reads a tag starting at '<'. Returns nullopt only in repair mode when the
  // input ends inside the tag.
  std::optional<RawTag> read_tag() {
    std::size_t start = pos_;
    std::size_t close = src_.find('>', pos_);
    if (close == std::string_view::npos) {
      if (repair_) {
        pos_ = src_.size();
        return std::nullopt;
      }
      fail("unterminated tag");
    }
    RawTag raw;
    ++pos_;
    if (pos_ < close && src_[pos_] == '/') {
      raw.closing = true;
      ++pos_;
    }
    std::size_t name_start = pos_;
    while (pos_ < close && std::isalnum(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    raw.name = lower(src_.substr(name_start, pos_ - name_start));
    if (raw.name.empty()) {
      if (repair_) {
        pos_ = close + 1;
        return raw;
      }
      pos_ = start;
      fail("empty tag name");
    }
    while (true) {
      skip_space();
      if (pos_ >= close) break;
      if (src_[pos_] == '/' && pos_ + 1 == close) {
        raw.self_closing = true;
        ++pos_;
        break;
      }
      std::size_t key_start = pos_;
      while (pos_ < close && !is_space(src_[pos_]) && src_[pos_] != '=' && src_[pos_] != '/') ++pos_;
      std::string key = lower(src_.substr(key_start, pos_ - key_start));
      if (key.empty()) {
        if (!repair_) fail("bad attribute syntax");
        ++pos_;
        continue;
      }
      skip_space();
      std::string value;
      if (pos_ < close && src_[pos_] == '=') {
        ++pos_;
        skip_space();
        if (pos_ < close && (src_[pos_] == '"' || src_[pos_] == '\'')) {
          char quote = src_[pos_++];
          std::size_t end = src_.find(quote, pos_);
          if (end == std::string_view::npos || end > close) {
            if (!repair_) fail("unterminated attribute value");
            end = close;
          }
          value = std::string(src_.substr(pos_, end - pos_));
          pos_ = std::min(end + 1, close);
        } else {
          std::size_t vstart = pos_;
          while (pos_ < close && !is_space(src_[pos_])) ++pos_;
          value = std::string(src_.substr(vstart, pos_ - vstart));
        }
      }
      if (raw.closing && !repair_) fail("attribute on closing tag");
      raw.attrs.emplace_back(std::move(key), std::move(value));
    }
    pos_ = close + 1;
    return raw;
  }

  std::string_view src_;
  bool repair_;
  std::size_t pos_ = 0;
  std::vector<TableNode*> stack_;
};

void serialize(const TableNode& node, std::string& out) {
  out += '<';
  out += tag_name(node.tag);
  if (node.tag == Tag::Td) {
    if (node.rowspan > 1) out += " rowspan=\"" + std::to_string(node.rowspan) + "\"";
    if (node.colspan > 1) out += " colspan=\"" + std::to_string(node.colspan) + "\"";
    out += '>';
    encode_entities(node.content, out);
  } else {
    out += '>';
    for (const auto& child : node.children) serialize(child, out);
  }
  out += "</";
  out += tag_name(node.tag);
  out += '>';
}

bool any_span(const TableNode& node) {
  if (node.tag == Tag::Td) return node.rowspan > 1 || node.colspan > 1;
  return std::any_of(node.children.begin(), node.children.end(), any_span);
}

void erase_content(TableNode& node) {
  node.content.clear();
  for (auto& child : node.children) erase_content(child);
}

}  // namespace

std::size_t TableTree::node_count() const { return count_nodes(root); }

std::size_t TableTree::cell_count() const { return cells().size(); }

std::vector<const TableNode*> TableTree::cells() const {
  std::vector<const TableNode*> out;
  collect_cells(root, out);
  return out;
}

std::vector<TableNode*> TableTree::cells() {
  std::vector<TableNode*> out;
  collect_cells(root, out);
  return out;
}

TableTree TableTree::skeleton() const {
  TableTree copy = *this;
  erase_content(copy.root);
  return copy;
}

TableTree parse_html(std::string_view html, ParseMode mode) { return Parser(html, mode).run(); }

std::string to_html(const TableTree& tree) {
  std::string out;
  serialize(tree.root, out);
  return out;
}

Complexity classify(const TableTree& tree) {
  return any_span(tree.root) ? Complexity::Complex : Complexity::Simple;
}

GridLayout compute_layout(const TableTree& tree) {
  GridLayout layout;
  // occupied[r][c] for the rows seen so far; grows on demand
  std::vector<std::vector<bool>> occupied;
  auto ensure = [&](int rows, int cols) {
    if (static_cast<int>(occupied.size()) < rows) occupied.resize(static_cast<std::size_t>(rows));
    for (auto& row : occupied) {
      if (static_cast<int>(row.size()) < cols) row.resize(static_cast<std::size_t>(cols), false);
    }
  };

  int row = 0;
  for (const auto& section : tree.root.children) {
    for (const auto& tr : section.children) {
      ensure(row + 1, 0);
      int col = 0;
      for (const auto& td : tr.children) {
        while (col < static_cast<int>(occupied[static_cast<std::size_t>(row)].size()) &&
               occupied[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)]) {
          ++col;
        }
        ensure(row + td.rowspan, col + td.colspan);
        for (int r = row; r < row + td.rowspan; ++r) {
          for (int c = col; c < col + td.colspan; ++c) {
            occupied[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = true;
          }
        }
        layout.cells.push_back(CellPlacement{row, col, td.rowspan, td.colspan});
        col += td.colspan;
      }
      ++row;
    }
  }
  layout.rows = static_cast<int>(occupied.size());
  for (const auto& r : occupied) layout.cols = std::max(layout.cols, static_cast<int>(r.size()));
  for (const auto& r : occupied) {
    layout.row_widths.push_back(static_cast<int>(std::count(r.begin(), r.end(), true)));
  }
  return layout;
}

}  // namespace wstab

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace wstab {

enum class Tag { Table, Thead, Tbody, Tr, Td };

std::string_view tag_name(Tag tag) noexcept;

/// One element of an HTML table. `rowspan`, `colspan` and `content` are only
/// meaningful on `Td` nodes, which are always leaves.
struct TableNode {
  Tag tag = Tag::Table;
  int rowspan = 1;
  int colspan = 1;
  std::string content;
  std::vector<TableNode> children;

  bool operator==(const TableNode&) const = default;
};

/// Canonical tree of a table restricted to table/thead/tbody/tr/td with
/// rowspan/colspan attributes and flat text cells.
struct TableTree {
  TableNode root{};

  /// Number of nodes including the table root, counting the text of a
  /// non-empty cell as a node of its own as an HTML DOM would.
  std::size_t node_count() const;
  std::size_t cell_count() const;

  /// Cells in document (reading) order.
  std::vector<const TableNode*> cells() const;
  std::vector<TableNode*> cells();

  /// Copy with every cell's content erased.
  TableTree skeleton() const;

  bool operator==(const TableTree&) const = default;
};

enum class ParseMode {
  Strict,
  // Closes unclosed tags, drops unknown markup and stray closing tags, and
  // opens missing row/section wrappers. Never throws on well-formed UTF-8.
  Repair,
};

/// Parses the restricted grammar. Whitespace between tags is ignored; text
/// inside a cell is kept verbatim apart from the &amp; &lt; &gt; &quot;
/// entities. Throws Error(MalformedHtml) in strict mode.
TableTree parse_html(std::string_view html, ParseMode mode = ParseMode::Strict);

/// Lowercase tags, spans emitted only when > 1 (rowspan before colspan).
std::string to_html(const TableTree& tree);

enum class Complexity { Simple, Complex };

Complexity classify(const TableTree& tree);

/// Placement of every cell on the logical row/column grid, following the
/// usual HTML table layout rules (rowspans occupy slots in later rows).
struct CellPlacement {
  int row = 0;
  int col = 0;
  int rowspan = 1;
  int colspan = 1;
};

struct GridLayout {
  int rows = 0;
  int cols = 0;
  std::vector<CellPlacement> cells;  // same order as TableTree::cells()
  std::vector<int> row_widths;       // occupied slots per row, counting carried rowspans
};

GridLayout compute_layout(const TableTree& tree);

}  // namespace wstab

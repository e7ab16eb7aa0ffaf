#include <gtest/gtest.h>

#include <functional>

#include "support.hpp"
#include "wstab/error.hpp"
#include "wstab/table_model.hpp"

using namespace wstab;

TEST(ParseHtml, SingleCellHasFiveNodes) {
  auto t = parse_html("<table><tbody><tr><td>x</td></tr></tbody></table>");
  EXPECT_EQ(t.node_count(), 5u);
  ASSERT_EQ(t.cells().size(), 1u);
  EXPECT_EQ(t.cells()[0]->content, "x");
  EXPECT_EQ(t.root.tag, Tag::Table);
  EXPECT_EQ(t.root.children[0].tag, Tag::Tbody);
}

TEST(ParseHtml, UnclosedInputIsMalformed) {
  EXPECT_EQ(testutil::error_code([] { parse_html("<table><tbody><tr><td>"); }), Errc::MalformedHtml);
}

TEST(ParseHtml, RowspanAttribute) {
  auto t = parse_html("<table><tbody><tr><td rowspan=\"2\">A</td></tr></tbody></table>");
  auto cells = t.cells();
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0]->rowspan, 2);
  EXPECT_EQ(cells[0]->colspan, 1);
  EXPECT_EQ(cells[0]->content, "A");
}

TEST(ParseHtml, WhitespaceBetweenTagsIgnored) {
  auto a = parse_html("<table>\n  <tbody>\n    <tr> <td>1</td>\n <td>2</td></tr>\n  </tbody>\n</table>\n");
  auto b = parse_html("<table><tbody><tr><td>1</td><td>2</td></tr></tbody></table>");
  EXPECT_EQ(a, b);
}

TEST(ParseHtml, RejectsGrammarViolations) {
  const char* bad[] = {
      "<table><tbody><tr><td><b>x</b></td></tr></tbody></table>",     // unknown tag
      "<table><tbody><tr><td class=\"a\">x</td></tr></tbody></table>",  // unknown attribute
      "<table><tbody><td>x</td></tbody></table>",                      // td outside tr
      "<table><tbody><tr><td rowspan=\"two\">x</td></tr></tbody></table>",
      "<table><tbody><tr><td colspan=\"0\">x</td></tr></tbody></table>",
      "<table><tbody><tr>text</tr></tbody></table>",
      "<table><tbody><tr><td>x</td></tr></table>",
      "<tbody><tr><td>x</td></tr></tbody>",
  };
  for (const char* html : bad) {
    EXPECT_EQ(testutil::error_code([&] { parse_html(html); }), Errc::MalformedHtml) << html;
  }
}

TEST(ParseHtml, RepairModeNeverThrowsAndKeepsCells) {
  auto t = parse_html("<table><tr><td>1<td>2</tr><foo><tr><td>3", ParseMode::Repair);
  EXPECT_EQ(t.cell_count(), 3u);
  // repaired output is grammatical
  EXPECT_EQ(parse_html(to_html(t)), t);
}

TEST(ParseHtml, EntitiesDecodeAndReencode) {
  auto t = parse_html("<table><tbody><tr><td>a &amp; b &lt;c&gt;</td></tr></tbody></table>");
  EXPECT_EQ(t.cells()[0]->content, "a & b <c>");
  EXPECT_EQ(to_html(t), "<table><tbody><tr><td>a &amp; b &lt;c&gt;</td></tr></tbody></table>");
}

TEST(ToHtml, CanonicalForms) {
  TableTree t;
  t.root.tag = Tag::Table;
  TableNode body = testutil::node_of(Tag::Tbody);
  TableNode tr = testutil::node_of(Tag::Tr);
  TableNode td = testutil::node_of(Tag::Td);
  td.content = "x";
  tr.children.push_back(td);
  body.children.push_back(tr);
  t.root.children.push_back(body);
  EXPECT_EQ(to_html(t), "<table><tbody><tr><td>x</td></tr></tbody></table>");

  auto& cell = t.root.children[0].children[0].children[0];
  cell.content = "";
  cell.rowspan = 2;
  EXPECT_EQ(to_html(t), "<table><tbody><tr><td rowspan=\"2\"></td></tr></tbody></table>");
  cell.colspan = 3;
  EXPECT_EQ(to_html(t), "<table><tbody><tr><td rowspan=\"2\" colspan=\"3\"></td></tr></tbody></table>");
}

TEST(ToHtml, RoundtripOnRandomTrees) {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    auto t = testutil::random_tree(rng);
    ASSERT_EQ(parse_html(to_html(t)), t) << to_html(t);
  }
}

TEST(NodeCount, ElementsPlusNonEmptyTexts) {
  Rng rng(12);
  std::function<std::size_t(const TableNode&)> count = [&](const TableNode& n) {
    std::size_t c = n.content.empty() ? 1 : 2;
    for (const auto& ch : n.children) c += count(ch);
    return c;
  };
  for (int i = 0; i < 200; ++i) {
    auto t = testutil::random_tree(rng);
    EXPECT_EQ(t.node_count(), count(t.root));
  }
}

TEST(Classify, SpanRules) {
  EXPECT_EQ(classify(parse_html("<table><tbody><tr><td>a</td><td>b</td></tr></tbody></table>")), Complexity::Simple);
  EXPECT_EQ(classify(parse_html("<table><tbody><tr><td rowspan=\"2\">a</td></tr><tr></tr></tbody></table>")),
            Complexity::Complex);
  EXPECT_EQ(classify(parse_html("<table><tbody><tr><td colspan=\"3\">a</td></tr></tbody></table>")),
            Complexity::Complex);
}

TEST(Classify, InvariantUnderContentChanges) {
  Rng rng(13);
  for (int i = 0; i < 300; ++i) {
    auto t = testutil::random_tree(rng);
    auto u = t;
    for (auto* c : u.cells()) c->content = "zz";
    EXPECT_EQ(classify(t), classify(u));
  }
}

TEST(Skeleton, ErasesContentOnly) {
  auto t = parse_html("<table><thead><tr><td>h</td></tr></thead><tbody><tr><td colspan=\"2\">x</td></tr></tbody></table>");
  auto s = t.skeleton();
  EXPECT_EQ(s.cell_count(), t.cell_count());
  EXPECT_EQ(s.node_count(), t.node_count() - 2);  // two text nodes gone
  for (const auto* c : s.cells()) EXPECT_TRUE(c->content.empty());
  EXPECT_EQ(s.cells()[1]->colspan, 2);
}

TEST(Layout, CarriesRowspansIntoLaterRows) {
  auto t = parse_html(
      "<table><tbody><tr><td rowspan=\"2\">a</td><td>b</td></tr><tr><td>c</td></tr>"
      "<tr><td colspan=\"2\">d</td></tr></tbody></table>");
  auto g = compute_layout(t);
  EXPECT_EQ(g.rows, 3);
  EXPECT_EQ(g.cols, 2);
  ASSERT_EQ(g.cells.size(), 4u);
  EXPECT_EQ(g.cells[2].row, 1);
  EXPECT_EQ(g.cells[2].col, 1);  // column 0 is still occupied by "a"
  EXPECT_EQ(g.cells[3].colspan, 2);
  EXPECT_EQ(g.row_widths, (std::vector<int>{2, 2, 2}));
}

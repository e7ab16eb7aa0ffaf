#include <gtest/gtest.h>

#include <functional>

#include "support.hpp"
#include "wstab/error.hpp"
#include "wstab/tokenizer.hpp"

using namespace wstab;

namespace {

const StructVocab& V = StructVocab::standard();

TokenSeq ids(std::initializer_list<const char*> tokens) {
  TokenSeq out;
  for (const char* t : tokens) out.push_back(V.vocab().id(t));
  return out;
}

}  // namespace

TEST(StructVocab, FixedOrder) {
  const char* expected[] = {"<pad>", "<sos>", "<eos>", "<unk>", "<thead>", "</thead>", "<tbody>", "</tbody>",
                            "<tr>",  "</tr>", "<td></td>", "<td", ">", "</td>", "rowspan=", "colspan=",
                            "2",     "3",     "4",     "5",     "6",     "7",     "8",     "9",     "10"};
  ASSERT_EQ(V.size(), std::size(expected));
  for (std::size_t i = 0; i < std::size(expected); ++i) {
    EXPECT_EQ(V.vocab().token(static_cast<int>(i)), expected[i]);
    EXPECT_EQ(V.vocab().id(expected[i]), static_cast<int>(i));
  }
  EXPECT_EQ(V.vocab().id("<pad>"), kPad);
  EXPECT_EQ(V.number(2), V.vocab().id("2"));
  EXPECT_EQ(V.span_value(V.number(10)), 10);
  EXPECT_FALSE(V.span_value(V.tr_open).has_value());
}

TEST(CellVocab, ControlsThenAlphabet) {
  CellVocab c("AB ");
  EXPECT_EQ(c.size(), 7u);
  EXPECT_EQ(c.vocab().token(0), "<pad>");
  EXPECT_EQ(c.vocab().token(3), "<unk>");
  EXPECT_EQ(c.char_id('A'), 4);
  EXPECT_EQ(c.char_id(' '), 6);
  EXPECT_FALSE(c.char_id('z').has_value());
}

TEST(Vocab, SaveLoadRoundtrip) {
  auto path = testutil::temp_dir("vocab") / "struct.txt";
  V.vocab().save(path);
  Vocab loaded = Vocab::load(path);
  EXPECT_EQ(testutil::read_file(path).substr(0, 12), "<pad>\n<sos>\n");
  ASSERT_EQ(loaded.size(), V.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) EXPECT_EQ(loaded.token(static_cast<int>(i)), V.vocab().token(static_cast<int>(i)));
}

TEST(TokenizeStructure, SingleCell) {
  auto t = parse_html("<table><tbody><tr><td>x</td></tr></tbody></table>");
  EXPECT_EQ(tokenize_structure(t), ids({"<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>"}));
}

TEST(TokenizeStructure, SpanningCells) {
  auto t = parse_html("<table><tbody><tr><td rowspan=\"2\"></td></tr><tr></tr></tbody></table>");
  EXPECT_EQ(tokenize_structure(t), ids({"<tbody>", "<tr>", "<td", "rowspan=", "2", ">", "</td>", "</tr>", "<tr>",
                                        "</tr>", "</tbody>", "<eos>"}));
  auto u = parse_html("<table><tbody><tr><td colspan=\"3\" rowspan=\"2\"></td></tr></tbody></table>");
  EXPECT_EQ(tokenize_structure(u), ids({"<tbody>", "<tr>", "<td", "rowspan=", "2", "colspan=", "3", ">", "</td>",
                                        "</tr>", "</tbody>", "<eos>"}));
}

TEST(TokenizeStructure, SpanLimits) {
  auto t = parse_html("<table><tbody><tr><td colspan=\"11\"></td></tr></tbody></table>");
  EXPECT_EQ(testutil::error_code([&] { tokenize_structure(t); }), Errc::SpanOutOfVocab);
  StructTokenizeOptions lenient;
  lenient.strict = false;
  auto seq = tokenize_structure(t, V, lenient);
  EXPECT_EQ(seq[4], V.number(10));
}

TEST(TokenizeStructure, MaxLength) {
  auto t = parse_html("<table><tbody><tr><td></td><td></td></tr></tbody></table>");
  StructTokenizeOptions o;
  o.max_len = 6;
  EXPECT_EQ(testutil::error_code([&] { tokenize_structure(t, V, o); }), Errc::TooLong);
  o.max_len = 7;
  EXPECT_EQ(tokenize_structure(t, V, o).size(), 7u);
}

TEST(DetokenizeStructure, Examples) {
  auto t = detokenize_structure(ids({"<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>"}));
  EXPECT_EQ(to_html(t), "<table><tbody><tr><td></td></tr></tbody></table>");

  auto u = detokenize_structure(ids({"<tbody>", "<tr>", "<td", "colspan=", "2", ">", "</td>", "</tr>", "</tbody>"}));
  ASSERT_EQ(u.cells().size(), 1u);
  EXPECT_EQ(u.cells()[0]->colspan, 2);
  EXPECT_EQ(u.cells()[0]->rowspan, 1);
}

TEST(DetokenizeStructure, IllFormedSequences) {
  std::vector<TokenSeq> bad = {
      ids({"<tr>", "</tbody>"}),
      ids({"<tbody>", "<tr>", "<td", "2", ">", "</td>", "</tr>", "</tbody>"}),
      ids({"<tbody>", "<tr>", ">", "</tr>", "</tbody>"}),
      ids({"<tbody>", "<tr>", "<td></td>"}),
      ids({"<tbody>", "<tr>", "<td", "rowspan=", ">", "</td>", "</tr>", "</tbody>"}),
      ids({"<td></td>"}),
  };
  for (const auto& seq : bad) {
    EXPECT_EQ(testutil::error_code([&] { detokenize_structure(seq); }), Errc::IllFormedSequence)
        << render_tokens(seq, V.vocab());
  }
}

TEST(DetokenizeStructure, TrailingPadAndEosIgnored) {
  auto seq = ids({"<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>", "<pad>", "<pad>"});
  EXPECT_EQ(detokenize_structure(seq).cell_count(), 1u);
}

TEST(DetokenizeStructure, RepairKeepsOneCellPerCellToken) {
  Rng rng(21);
  for (int i = 0; i < 2000; ++i) {
    TokenSeq seq;
    int len = rng.uniform_int(0, 30);
    for (int k = 0; k < len; ++k) seq.push_back(rng.uniform_int(0, static_cast<int>(V.size()) - 1));
    auto t = detokenize_structure(seq, V, DetokenizeMode::Repair);
    std::size_t expected = 0;
    for (int id : seq) {
      if (id == kEos) break;
      expected += V.is_cell_token(id) ? 1 : 0;
    }
    ASSERT_EQ(t.cell_count(), expected) << render_tokens(seq, V.vocab());
    ASSERT_EQ(parse_html(to_html(t)), t);
  }
}

TEST(TokenizeStructure, RoundtripAndCountInvariant) {
  Rng rng(22);
  for (int i = 0; i < 3000; ++i) {
    auto t = testutil::random_tree(rng);
    auto seq = tokenize_structure(t);
    ASSERT_EQ(detokenize_structure(seq), t.skeleton()) << to_html(t);
    ASSERT_EQ(count_cell_tokens(seq), t.cell_count());
    for (std::size_t k = 0; k < seq.size(); ++k) {
      if (seq[k] == V.rowspan_kw || seq[k] == V.colspan_kw) {
        ASSERT_LT(k + 1, seq.size());
        ASSERT_TRUE(V.span_value(seq[k + 1]).has_value());
      }
    }
    ASSERT_EQ(seq.back(), kEos);
  }
}

TEST(TokenizeCell, Examples) {
  CellVocab c("ABx7");
  EXPECT_EQ(tokenize_cell("AB", c).ids, (TokenSeq{*c.char_id('A'), *c.char_id('B'), kEos}));
  EXPECT_EQ(tokenize_cell("", c).ids, (TokenSeq{kEos}));
  EXPECT_EQ(detokenize_cell(tokenize_cell("x7", c).ids, c), "x7");
}

TEST(TokenizeCell, UnknownCharactersCounted) {
  CellVocab c("AB");
  auto r = tokenize_cell("AzB?", c);
  EXPECT_EQ(r.unknown, 2u);
  EXPECT_EQ(r.ids[1], kUnk);
  EXPECT_EQ(detokenize_cell(r.ids, c), "AB");
}

TEST(TokenizeCell, MaxLength) {
  CellVocab c("AB");
  EXPECT_EQ(testutil::error_code([&] { tokenize_cell("ABA", c, 3); }), Errc::TooLong);
  EXPECT_EQ(tokenize_cell("AB", c, 3).ids.size(), 3u);
}

TEST(TokenizeCell, StopsAtEosAndDropsControls) {
  CellVocab c("AB");
  TokenSeq seq{kSos, *c.char_id('A'), kPad, *c.char_id('B'), kEos, *c.char_id('A')};
  EXPECT_EQ(detokenize_cell(seq, c), "AB");
}

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "wstab/dataset.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/synth.hpp"
#include "wstab/tokenizer.hpp"

using namespace wstab;
namespace fs = std::filesystem;

namespace {

std::size_t ink_count(const GrayImage& img) {
  std::size_t n = 0;
  for (auto p : img.pixels) n += p < 128 ? 1 : 0;
  return n;
}

bool ink(const GrayImage& img, int row, int col) { return img.at(row, col) < 128; }

GenConfig plain() {
  GenConfig g;
  g.span_prob = 0;
  g.header_prob = 0;
  return g;
}

}  // namespace

TEST(Glyphs, AlphabetCoverage) {
  for (char c : std::string("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ .,-+:/%()$=")) {
    EXPECT_TRUE(has_glyph(c)) << c;
    EXPECT_EQ(glyph_bitmap(c).size(), 35u) << c;
  }
  EXPECT_FALSE(has_glyph('a'));
  EXPECT_TRUE(glyph_bitmap('a').empty());
  EXPECT_EQ(glyph_bitmap(' ').find('#'), std::string_view::npos);
}

TEST(GenConfig, Validation) {
  GenConfig g;
  g.alphabet = "01a";
  EXPECT_EQ(testutil::error_code([&] { g.validate(); }), Errc::InvalidConfig);
  g = GenConfig{};
  g.min_rows = 3;
  g.max_rows = 2;
  EXPECT_EQ(testutil::error_code([&] { g.validate(); }), Errc::InvalidConfig);
  g = GenConfig{};
  g.span_prob = 1.5;
  EXPECT_EQ(testutil::error_code([&] { g.validate(); }), Errc::InvalidConfig);
  nlohmann::json j = GenConfig{};
  GenConfig back = j.get<GenConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(SampleTable, ForcedOneByTwoTokens) {
  GenConfig g = plain();
  g.min_rows = g.max_rows = 1;
  g.min_cols = g.max_cols = 2;
  Rng rng(1);
  auto t = sample_table(rng, g);
  const auto& V = StructVocab::standard().vocab();
  TokenSeq expected;
  for (const char* tok : {"<tbody>", "<tr>", "<td></td>", "<td></td>", "</tr>", "</tbody>", "<eos>"}) {
    expected.push_back(V.id(tok));
  }
  EXPECT_EQ(tokenize_structure(t), expected);
}

TEST(Render, EmptyOneByOneIsBorderRectangle) {
  GenConfig g = plain();
  auto t = parse_html("<table><tbody><tr><td></td></tr></tbody></table>");
  auto img = render(t, g);
  auto geom = table_geometry(1, 1, g);
  int w = geom.col_lines[1] - geom.col_lines[0] + 1;
  int h = geom.row_lines[1] - geom.row_lines[0] + 1;
  EXPECT_EQ(ink_count(img), static_cast<std::size_t>(2 * w + 2 * h - 4));
  EXPECT_TRUE(ink(img, geom.row_lines[0], geom.col_lines[0]));
  EXPECT_TRUE(ink(img, geom.row_lines[1], geom.col_lines[1]));
  EXPECT_FALSE(ink(img, 0, 0));
}

TEST(Render, ColspanHasNoInteriorBorder) {
  GenConfig g = plain();
  auto t = parse_html("<table><tbody><tr><td colspan=\"2\"></td></tr><tr><td></td><td></td></tr></tbody></table>");
  auto img = render(t, g);
  auto geom = table_geometry(2, 2, g);
  int x = geom.col_lines[1];
  for (int y = geom.row_lines[0] + 1; y < geom.row_lines[1]; ++y) EXPECT_FALSE(ink(img, y, x)) << y;
  for (int y = geom.row_lines[1] + 1; y < geom.row_lines[2]; ++y) EXPECT_TRUE(ink(img, y, x)) << y;
}

TEST(Render, HeaderGetsDoubleRule) {
  GenConfig g = plain();
  auto t = parse_html("<table><thead><tr><td></td></tr></thead><tbody><tr><td></td></tr></tbody></table>");
  auto img = render(t, g);
  auto geom = table_geometry(2, 1, g);
  for (int x = geom.col_lines[0]; x <= geom.col_lines[1]; ++x) {
    EXPECT_TRUE(ink(img, geom.row_lines[1], x));
    EXPECT_TRUE(ink(img, geom.row_lines[1] + 1, x));
  }
  EXPECT_FALSE(ink(img, geom.row_lines[1] + 2, geom.col_lines[0] + 5));
}

TEST(Render, TextIsDrawnInsideItsCell) {
  GenConfig g = plain();
  auto empty = render(parse_html("<table><tbody><tr><td></td><td></td></tr></tbody></table>"), g);
  auto text = render(parse_html("<table><tbody><tr><td>8</td><td></td></tr></tbody></table>"), g);
  auto geom = table_geometry(1, 2, g);
  std::size_t extra = 0;
  for (int y = 0; y < g.image_h; ++y) {
    for (int x = 0; x < g.image_w; ++x) {
      if (ink(text, y, x) && !ink(empty, y, x)) {
        ++extra;
        EXPECT_GT(x, geom.col_lines[0]);
        EXPECT_LT(x, geom.col_lines[1]);
      }
    }
  }
  auto bitmap = glyph_bitmap('8');
  EXPECT_EQ(extra, static_cast<std::size_t>(std::count(bitmap.begin(), bitmap.end(), '#')));
}

TEST(Render, IdenticalTreesGiveIdenticalImages) {
  Rng rng(2);
  GenConfig g;
  for (int i = 0; i < 20; ++i) {
    auto t = sample_table(rng, g);
    try {
      EXPECT_EQ(render(t, g), render(parse_html(to_html(t)), g));
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::Overflow);
    }
  }
}

TEST(Render, OverflowWhenTextDoesNotFit) {
  GenConfig g = plain();
  g.image_h = g.image_w = 16;
  g.max_text_len = 4;
  auto t = parse_html("<table><tbody><tr><td>8888</td></tr></tbody></table>");
  EXPECT_EQ(testutil::error_code([&] { render(t, g); }), Errc::Overflow);
}

TEST(Generate, ImagesHaveConfiguredSize) {
  GenConfig g;
  g.image_h = 48;
  g.image_w = 80;
  g.seed = 9;
  for (std::size_t i = 0; i < 30; ++i) {
    auto s = generate_sample(g, i, 30);
    EXPECT_EQ(s.image.height, 48);
    EXPECT_EQ(s.image.width, 80);
    EXPECT_EQ(s.image.pixels.size(), 48u * 80u);
  }
}

TEST(Generate, SameSeedByteIdenticalDataset) {
  GenConfig g;
  g.seed = 5;
  g.test_fraction = 0.25;
  auto a = testutil::temp_dir("synth_a"), b = testutil::temp_dir("synth_b");
  generate(g, 24, a, 1);
  generate(g, 24, b, 3);
  EXPECT_EQ(testutil::read_file(annotations_path(a)), testutil::read_file(annotations_path(b)));
  for (std::size_t i = 0; i < 24; ++i) {
    EXPECT_EQ(testutil::read_file(image_path(a, sample_id(i))), testutil::read_file(image_path(b, sample_id(i))));
  }
  g.seed = 6;
  auto c = testutil::temp_dir("synth_c");
  generate(g, 24, c);
  EXPECT_NE(testutil::read_file(annotations_path(a)), testutil::read_file(annotations_path(c)));
}

TEST(Generate, LabelsMatchSourceTreesAndSplits) {
  GenConfig g;
  g.seed = 8;
  g.test_fraction = 0.25;
  g.span_prob = 0.5;
  g.header_prob = 0.5;
  const std::size_t n = 40;
  auto dir = testutil::temp_dir("synth_labels");
  generate(g, n, dir);
  auto records = load_records(dir);
  ASSERT_EQ(records.size(), n);
  NetConfig net;
  net.alphabet = g.alphabet;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = generate_sample(g, i, n);
    EXPECT_EQ(records[i].id, sample_id(i));
    EXPECT_EQ(records[i].id, s.id);
    EXPECT_EQ(parse_html(records[i].html), s.tree);
    EXPECT_EQ(records[i].split, i < 30 ? "train" : "test");
    auto img = read_pgm(image_path(dir, s.id));
    EXPECT_EQ(img, s.image);
    auto sample = make_sample(records[i], img, net);
    EXPECT_EQ(sample.targets.struct_targets, tokenize_structure(s.tree));
    auto cells = s.tree.cells();
    ASSERT_EQ(sample.targets.cell_targets.size(), cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
      EXPECT_EQ(detokenize_cell(sample.targets.cell_targets[k], CellVocab(g.alphabet)), cells[k]->content);
    }
  }
  EXPECT_EQ(sample_id(123), "t000123");
}

TEST(SampleTable, SpansAreLegalAndGridsRectangular) {
  GenConfig g;
  g.span_prob = 0.7;
  g.header_prob = 0.5;
  Rng rng(10);
  int complex = 0;
  for (int i = 0; i < 3000; ++i) {
    auto t = sample_table(rng, g);
    auto layout = compute_layout(t);
    ASSERT_GE(layout.rows, g.min_rows);
    ASSERT_LE(layout.rows, g.max_rows);
    ASSERT_LE(layout.cols, g.max_cols);
    for (int w : layout.row_widths) ASSERT_EQ(w, layout.cols) << to_html(t);
    for (const auto& p : layout.cells) {
      ASSERT_LE(p.row + p.rowspan, layout.rows) << to_html(t);
      ASSERT_LE(p.rowspan, 3);
      ASSERT_LE(p.colspan, 3);
    }
    for (const auto& section : t.root.children) {
      if (section.tag != Tag::Thead) continue;
      for (const auto& tr : section.children) {
        for (const auto& td : tr.children) ASSERT_EQ(td.rowspan, 1) << to_html(t);
      }
    }
    complex += classify(t) == Complexity::Complex ? 1 : 0;
  }
  EXPECT_GT(complex, 0);
}

TEST(Generate, ComplexShareWithinBinomialBounds) {
  GenConfig g;
  g.seed = 11;
  g.span_prob = 0.15;
  const std::size_t n = 10000;
  std::size_t complex = 0;
  for (std::size_t i = 0; i < n; ++i) {
    complex += classify(generate_sample(g, i, n).tree) == Complexity::Complex ? 1 : 0;
  }
  double mean = static_cast<double>(n) * g.span_prob;
  double sigma = std::sqrt(mean * (1 - g.span_prob));
  EXPECT_LE(std::abs(static_cast<double>(complex) - mean), 3 * sigma) << complex;
}

TEST(SampleTable, ImpossibleSpanLayoutIsUnsatisfiable) {
  GenConfig g;
  g.min_rows = g.max_rows = 2;
  g.min_cols = g.max_cols = 1;
  g.span_prob = 1.0;
  g.header_prob = 0;
  Rng rng(12);
  EXPECT_EQ(testutil::error_code([&] { sample_table(rng, g); }), Errc::Unsatisfiable);
}

TEST(Pgm, RoundtripAndHeader) {
  GrayImage img{3, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255}};
  auto dir = testutil::temp_dir("pgm");
  write_pgm(dir / "x.pgm", img);
  EXPECT_EQ(testutil::read_file(dir / "x.pgm").substr(0, 11), "P5\n4 3\n255\n");
  EXPECT_EQ(read_pgm(dir / "x.pgm"), img);
  std::ofstream(dir / "bad.pgm", std::ios::binary) << "P2\n1 1\n255\n0";
  EXPECT_EQ(testutil::error_code([&] { read_pgm(dir / "bad.pgm"); }), Errc::DecodeError);
}

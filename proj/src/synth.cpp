#include "wstab/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <nlohmann/json.hpp>

#include "wstab/error.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/parallel.hpp"
#include "wstab/tokenizer.hpp"

namespace wstab {

namespace fs = std::filesystem;

namespace {

struct Glyph {
  char c;
  const char* rows;
};

constexpr Glyph kFont[] = {
#include "glyphs.inc"
};

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;
constexpr int kMargin = 1;
constexpr int kPad = 1;
constexpr int kMaxAttempts = 100;

}  // namespace

std::string_view glyph_bitmap(char c) {
  for (const auto& g : kFont) {
    if (g.c == c) return {g.rows, kGlyphW * kGlyphH};
  }
  return {};
}

bool has_glyph(char c) { return !glyph_bitmap(c).empty(); }

void GenConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
  if (min_rows < 1 || max_rows < min_rows) fail("rows range must satisfy 1 <= min_rows <= max_rows");
  if (min_cols < 1 || max_cols < min_cols) fail("cols range must satisfy 1 <= min_cols <= max_cols");
  if (span_prob < 0 || span_prob > 1) fail("span_prob must be in [0, 1]");
  if (header_prob < 0 || header_prob > 1) fail("header_prob must be in [0, 1]");
  if (test_fraction < 0 || test_fraction > 1) fail("test_fraction must be in [0, 1]");
  if (max_text_len < 0) fail("max_text_len must be >= 0");
  if (glyph_scale < 1) fail("glyph_scale must be >= 1");
  if (image_h < 3 || image_w < 3) fail("image too small");
  if (alphabet.empty()) fail("alphabet is empty");
  bool printable = false;
  for (char c : alphabet) {
    if (!has_glyph(c)) fail(std::string("no glyph for character '") + c + "'");
    if (c != ' ') printable = true;
  }
  if (!printable && max_text_len > 0) fail("alphabet needs at least one non-space character");
  CellVocab check(alphabet);
  (void)check;
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"seed", c.seed},           {"min_rows", c.min_rows},
                     {"max_rows", c.max_rows},   {"min_cols", c.min_cols},
                     {"max_cols", c.max_cols},   {"span_prob", c.span_prob},
                     {"header_prob", c.header_prob}, {"alphabet", c.alphabet},
                     {"max_text_len", c.max_text_len}, {"image_h", c.image_h},
                     {"image_w", c.image_w},     {"glyph_scale", c.glyph_scale},
                     {"test_fraction", c.test_fraction}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.min_rows = j.value("min_rows", c.min_rows);
  c.max_rows = j.value("max_rows", c.max_rows);
  c.min_cols = j.value("min_cols", c.min_cols);
  c.max_cols = j.value("max_cols", c.max_cols);
  c.span_prob = j.value("span_prob", c.span_prob);
  c.header_prob = j.value("header_prob", c.header_prob);
  c.alphabet = j.value("alphabet", c.alphabet);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.glyph_scale = j.value("glyph_scale", c.glyph_scale);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
}

TableGeometry table_geometry(int rows, int cols, const GenConfig& config) {
  TableGeometry g;
  int w = config.image_w - 1 - 2 * kMargin;
  int h = config.image_h - 1 - 2 * kMargin;
  for (int c = 0; c <= cols; ++c) g.col_lines.push_back(kMargin + c * w / cols);
  for (int r = 0; r <= rows; ++r) g.row_lines.push_back(kMargin + r * h / rows);
  return g;
}

namespace {

void hline(GrayImage& img, int y, int x0, int x1) {
  for (int x = x0; x <= x1; ++x) img.at(y, x) = 0;
}

void vline(GrayImage& img, int x, int y0, int y1) {
  for (int y = y0; y <= y1; ++y) img.at(y, x) = 0;
}

void draw_text(GrayImage& img, const std::string& text, int x0, int y0, int x1, int y1, int scale) {
  if (text.empty()) return;
  int n = static_cast<int>(text.size());
  int tw = n * kGlyphW * scale + (n - 1) * scale;
  int th = kGlyphH * scale;
  // interior excludes the border pixels themselves
  int iw = x1 - x0 - 1;
  int ih = y1 - y0 - 1;
  if (tw + 2 * kPad > iw || th + 2 * kPad > ih) {
    throw Error(Errc::Overflow, "\"" + text + "\" needs " + std::to_string(tw) + "x" + std::to_string(th) +
                                    " px, cell interior is " + std::to_string(iw) + "x" + std::to_string(ih));
  }
  int left = x0 + 1 + (iw - tw) / 2;
  int top = y0 + 1 + (ih - th) / 2;
  for (int k = 0; k < n; ++k) {
    auto bits = glyph_bitmap(text[static_cast<std::size_t>(k)]);
    if (bits.empty()) throw Error(Errc::InvalidConfig, std::string("no glyph for '") + text[k] + "'");
    int gx = left + k * (kGlyphW + 1) * scale;
    for (int r = 0; r < kGlyphH; ++r) {
      for (int c = 0; c < kGlyphW; ++c) {
        if (bits[static_cast<std::size_t>(r * kGlyphW + c)] != '#') continue;
        for (int dy = 0; dy < scale; ++dy) {
          for (int dx = 0; dx < scale; ++dx) img.at(top + r * scale + dy, gx + c * scale + dx) = 0;
        }
      }
    }
  }
}

}  // namespace

GrayImage render(const TableTree& tree, const GenConfig& config) {
  GrayImage img;
  img.height = config.image_h;
  img.width = config.image_w;
  img.pixels.assign(static_cast<std::size_t>(img.height) * img.width, 255);
  GridLayout layout = compute_layout(tree);
  if (layout.rows == 0 || layout.cols == 0) return img;
  auto geom = table_geometry(layout.rows, layout.cols, config);
  auto cells = tree.cells();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& p = layout.cells[i];
    int x0 = geom.col_lines[static_cast<std::size_t>(p.col)];
    int x1 = geom.col_lines[static_cast<std::size_t>(std::min(p.col + p.colspan, layout.cols))];
    int y0 = geom.row_lines[static_cast<std::size_t>(p.row)];
    int y1 = geom.row_lines[static_cast<std::size_t>(std::min(p.row + p.rowspan, layout.rows))];
    hline(img, y0, x0, x1);
    hline(img, y1, x0, x1);
    vline(img, x0, y0, y1);
    vline(img, x1, y0, y1);
    draw_text(img, cells[i]->content, x0, y0, x1, y1, config.glyph_scale);
  }
  // header rows: doubled rule under the last <thead> row
  int header_rows = 0;
  for (const auto& section : tree.root.children) {
    if (section.tag == Tag::Thead) header_rows += static_cast<int>(section.children.size());
  }
  if (header_rows > 0 && header_rows < layout.rows) {
    int y = geom.row_lines[static_cast<std::size_t>(header_rows)] + 1;
    hline(img, y, geom.col_lines.front(), geom.col_lines.back());
  }
  return img;
}

namespace {

std::string random_text(Rng& rng, const GenConfig& config) {
  int len = rng.uniform_int(0, config.max_text_len);
  std::string text;
  for (int i = 0; i < len; ++i) {
    char c;
    do {
      c = config.alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(config.alphabet.size()) - 1))];
      // leading/trailing spaces would be invisible in the image
    } while (c == ' ' && (i == 0 || i == len - 1));
    text.push_back(c);
  }
  return text;
}

TableNode make_node(Tag tag) {
  TableNode n;
  n.tag = tag;
  return n;
}

struct Span {
  int row, col, rowspan, colspan;
};

}  // namespace

TableTree sample_table(Rng& rng, const GenConfig& config) {
  // Complexity is drawn once so that rejected layouts don't skew the mix.
  bool complex = rng.bernoulli(config.span_prob) && config.max_rows * config.max_cols >= 2;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 10000) throw Error(Errc::Unsatisfiable, "no legal table layout for this size range");
    int rows = rng.uniform_int(config.min_rows, config.max_rows);
    int cols = rng.uniform_int(config.min_cols, config.max_cols);
    bool header = rows > 1 && rng.bernoulli(config.header_prob);
    if (complex && rows * cols < 2) continue;

    std::vector<int> owner(static_cast<std::size_t>(rows * cols), -1);
    auto at = [&](int r, int c) -> int& { return owner[static_cast<std::size_t>(r * cols + c)]; };
    std::vector<Span> spans;
    if (complex) {
      int wanted = 1 + (rng.bernoulli(0.3) ? 1 : 0);
      for (int tries = 0; tries < 20 && static_cast<int>(spans.size()) < wanted; ++tries) {
        int r = rng.uniform_int(0, rows - 1);
        int c = rng.uniform_int(0, cols - 1);
        if (at(r, c) != -1) continue;
        bool vertical = rng.bernoulli(0.5);
        int len = rng.uniform_int(2, 3);
        int rs = vertical ? len : 1;
        int cs = vertical ? 1 : len;
        if (r + rs > rows || c + cs > cols) continue;
        if (header && r == 0 && rs > 1) continue;  // rowspans may not leave <thead>
        bool free = true;
        for (int i = r; i < r + rs; ++i) {
          for (int j = c; j < c + cs; ++j) free = free && at(i, j) == -1;
        }
        if (!free) continue;
        for (int i = r; i < r + rs; ++i) {
          for (int j = c; j < c + cs; ++j) at(i, j) = static_cast<int>(spans.size());
        }
        spans.push_back({r, c, rs, cs});
      }
      if (spans.empty()) continue;
    }

    TableTree tree;
    tree.root.tag = Tag::Table;
    TableNode head = make_node(Tag::Thead);
    TableNode body = make_node(Tag::Tbody);
    bool empty_row = false;
    for (int r = 0; r < rows; ++r) {
      TableNode tr = make_node(Tag::Tr);
      for (int c = 0; c < cols; ++c) {
        int o = at(r, c);
        if (o >= 0 && (spans[static_cast<std::size_t>(o)].row != r || spans[static_cast<std::size_t>(o)].col != c)) {
          continue;
        }
        TableNode td = make_node(Tag::Td);
        if (o >= 0) {
          td.rowspan = spans[static_cast<std::size_t>(o)].rowspan;
          td.colspan = spans[static_cast<std::size_t>(o)].colspan;
        }
        td.content = random_text(rng, config);
        tr.children.push_back(std::move(td));
      }
      empty_row = empty_row || tr.children.empty();
      (header && r == 0 ? head : body).children.push_back(std::move(tr));
    }
    if (empty_row) continue;
    if (header) tree.root.children.push_back(std::move(head));
    tree.root.children.push_back(std::move(body));
    return tree;
  }
}

std::string sample_id(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "t" + digits;
}

SynthSample generate_sample(const GenConfig& config, std::size_t index, std::size_t total) {
  config.validate();
  Rng rng(mix_seed(config.seed, index));
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    TableTree tree = sample_table(rng, config);
    GrayImage image;
    try {
      image = render(tree, config);
    } catch (const Error& e) {
      if (e.code() == Errc::Overflow) continue;
      throw;
    }
    SynthSample s;
    s.id = sample_id(index);
    s.html = to_html(tree);
    s.tree = std::move(tree);
    s.image = std::move(image);
    auto n_test = static_cast<std::size_t>(std::llround(config.test_fraction * static_cast<double>(total)));
    s.split = index + n_test >= total ? "test" : "train";
    return s;
  }
  throw Error(Errc::Unsatisfiable, "no table fitting " + std::to_string(config.image_h) + "x" +
                                       std::to_string(config.image_w) + " pixels after " +
                                       std::to_string(kMaxAttempts) + " attempts");
}

void generate(const GenConfig& config, std::size_t n, const fs::path& dir, unsigned threads) {
  config.validate();
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw Error(Errc::Io, "cannot create " + (dir / "images").string() + ": " + ec.message());
  std::vector<nlohmann::json> records(n);
  parallel_for(n, threads, [&](std::size_t i) {
    auto s = generate_sample(config, i, n);
    write_pgm(image_path(dir, s.id), s.image);
    records[i] = {{"id", s.id}, {"html", s.html}, {"split", s.split}};
  });
  write_jsonl(annotations_path(dir), records);
}

}  // namespace wstab

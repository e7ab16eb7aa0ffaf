#pragma once

// Synthetic table generator: random grid structures with spans and short
// cell texts, rasterized with 1-pixel borders and 5x7 bitmap glyphs.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "wstab/dataset.hpp"
#include "wstab/rng.hpp"
#include "wstab/table_model.hpp"

namespace wstab {

struct GenConfig {
  std::uint64_t seed = 0;
  int min_rows = 1;
  int max_rows = 4;
  int min_cols = 1;
  int max_cols = 4;
  double span_prob = 0.15;    // probability that a table has spanning cells
  double header_prob = 0.3;   // probability that the first row goes into <thead>
  std::string alphabet = "0123456789ABCDEFGHIJKLMNOP ";
  int max_text_len = 2;
  int image_h = 64;
  int image_w = 64;
  int glyph_scale = 1;
  double test_fraction = 0.0;  // trailing share of ids assigned to the "test" split

  /// Throws InvalidConfig (bad ranges, characters without a glyph, ...).
  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// True when the built-in font can draw `c`.
bool has_glyph(char c);
/// Row-major 5x7 bitmap of `c` ('#' = ink); empty when unsupported.
std::string_view glyph_bitmap(char c);

struct TableGeometry {
  std::vector<int> col_lines;  // x of each vertical rule, cols + 1 entries
  std::vector<int> row_lines;  // y of each horizontal rule, rows + 1 entries
};

TableGeometry table_geometry(int rows, int cols, const GenConfig& config);

/// Draws borders around every cell's merged region and its text. A row
/// inside <thead> gets a second rule under it. Throws Overflow when text
/// does not fit its cell.
GrayImage render(const TableTree& tree, const GenConfig& config);

/// Random structure and contents, before rendering.
TableTree sample_table(Rng& rng, const GenConfig& config);

struct SynthSample {
  std::string id;
  TableTree tree;
  std::string html;
  GrayImage image;
  std::string split;
};

std::string sample_id(std::size_t index);

/// Deterministic in (config.seed, index). Resamples up to 100 times when the
/// content overflows, then throws Unsatisfiable.
SynthSample generate_sample(const GenConfig& config, std::size_t index, std::size_t total);

/// Writes `dir/images/{id}.pgm` and `dir/annotations.jsonl`.
void generate(const GenConfig& config, std::size_t n, const std::filesystem::path& dir, unsigned threads = 1);

}  // namespace wstab

#pragma once

// On-disk dataset: `images/{id}.pgm` plus `annotations.jsonl` holding
// {"id", "html", "split"} per line. Tokens are always re-derived from the
// HTML; any other fields in a record are ignored.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wstab/autodiff.hpp"
#include "wstab/network.hpp"
#include "wstab/table_model.hpp"

namespace wstab {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 0 = ink, 255 = background

  std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
  bool operator==(const GrayImage&) const = default;
};

/// Binary 8-bit PGM (P5). Throws FileNotFound / DecodeError / Io.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// [H, W] tensor with pixel/255.
ad::Tensor image_tensor(const GrayImage& image);

struct Record {
  std::string id;
  std::string html;
  std::string split;
};

std::filesystem::path annotations_path(const std::filesystem::path& dir);
std::filesystem::path image_path(const std::filesystem::path& dir, const std::string& id);

/// Records in file order, optionally restricted to one split. Throws
/// FileNotFound, DecodeError (bad JSON or missing id/html), DuplicateId.
std::vector<Record> load_records(const std::filesystem::path& dir, const std::optional<std::string>& split = {});

/// A record prepared for training: image plus teacher-forcing targets.
struct Sample {
  std::string id;
  ad::Tensor image;
  TrainTargets targets;
};

/// Parses the HTML strictly and tokenizes against the model limits. Throws
/// DecodeError for unparsable HTML, ShapeMismatch for wrong image size,
/// TooLong / SpanOutOfVocab from the tokenizer.
Sample make_sample(const Record& record, const GrayImage& image, const NetConfig& config);

std::vector<Sample> load_samples(const std::filesystem::path& dir, const NetConfig& config,
                                 const std::optional<std::string>& split = {}, unsigned threads = 1);

}  // namespace wstab

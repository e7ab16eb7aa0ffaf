#pragma once

// Greedy recognition: the structure decoder emits tokens until <eos> or the
// length limit; each emitted cell token immediately runs the cell decoder on
// the hidden vector at that position. The token sequence is then rebuilt into
// a table in repair mode and the cell texts are attached by cell index.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wstab/network.hpp"

namespace wstab {

struct RecognizeResult {
  std::string html;
  TokenSeq struct_tokens;  // as emitted, including the final <eos> if any
  std::vector<std::string> cell_texts;
  std::size_t cell_decoder_calls = 0;
  bool degenerate = false;  // no cells came out of the decode
};

/// image: [H, W] in [0, 1]. Never throws on model output; ShapeMismatch for a
/// wrongly sized image.
RecognizeResult recognize(const ModelParams& params, const NetConfig& config, const ad::Tensor& image);

/// Greedy decode of one cell given its conditioning hidden row [1, d].
TokenSeq decode_cell(const ModelParams& params, const NetConfig& config, const DecoderMemory& cell_memory,
                     const ad::Tensor& hidden_row);

struct InferOptions {
  std::optional<std::string> split;
  unsigned threads = 1;
};

/// Writes one {"id","html"} line per record, sorted by id. Throws
/// ConfigMismatch when the images do not match the checkpoint's input size.
/// Returns the number of predictions written.
std::size_t infer_batch(const std::filesystem::path& dataset, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& out, const InferOptions& options = {});

/// Same as infer_batch with parameters already in memory; returns (id, html)
/// pairs sorted by id.
std::vector<std::pair<std::string, std::string>> predict_dataset(const ModelParams& params, const NetConfig& config,
                                                                 const std::filesystem::path& dataset,
                                                                 const InferOptions& options = {});

}  // namespace wstab

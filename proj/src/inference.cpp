#include "wstab/inference.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "wstab/checkpoint.hpp"
#include "wstab/dataset.hpp"
#include "wstab/error.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/parallel.hpp"
#include "wstab/table_model.hpp"

namespace wstab {

namespace fs = std::filesystem;

namespace {

// Lowest index wins ties.
int argmax_row(const ad::Tensor& logits, int row) {
  int v = logits.dim(1);
  auto data = logits.data().subspan(static_cast<std::size_t>(row) * v, static_cast<std::size_t>(v));
  return static_cast<int>(std::max_element(data.begin(), data.end()) - data.begin());
}

}  // namespace

TokenSeq decode_cell(const ModelParams& params, const NetConfig& config, const DecoderMemory& cell_memory,
                     const ad::Tensor& hidden_row) {
  auto ctx = ForwardContext::eval();
  TokenSeq input{kSos};
  TokenSeq out;
  while (static_cast<int>(out.size()) < config.max_cell_len) {
    auto logits = cell_decoder_forward(params, config, cell_memory, hidden_row, input, ctx);
    int next = argmax_row(logits, logits.dim(0) - 1);
    out.push_back(next);
    if (next == kEos) break;
    input.push_back(next);
  }
  return out;
}

RecognizeResult recognize(const ModelParams& params, const NetConfig& config, const ad::Tensor& image) {
  ad::NoGradScope no_grad;
  const auto& vocab = StructVocab::standard();
  CellVocab cell_vocab(config.alphabet);
  auto ctx = ForwardContext::eval();
  FeatureGrid grid = encode(params, config, image, ctx);
  auto struct_memory = prepare_memory(params.struct_layers, grid.sequence);
  auto cell_memory = prepare_memory(params.cell_layers, grid.sequence);

  RecognizeResult result;
  TokenSeq input{kSos};
  while (static_cast<int>(result.struct_tokens.size()) < config.max_struct_len) {
    auto out = structure_decoder_forward(params, config, struct_memory, input, ctx);
    int pos = out.logits.dim(0) - 1;
    int next = argmax_row(out.logits, pos);
    result.struct_tokens.push_back(next);
    if (next == kEos) break;
    if (vocab.is_cell_token(next)) {
      auto hidden = ad::slice_rows(out.hidden, pos, pos + 1);
      result.cell_texts.push_back(detokenize_cell(decode_cell(params, config, cell_memory, hidden), cell_vocab));
      ++result.cell_decoder_calls;
    }
    input.push_back(next);
  }

  TableTree tree = detokenize_structure(result.struct_tokens, vocab, DetokenizeMode::Repair);
  auto cells = tree.cells();
  for (std::size_t i = 0; i < cells.size() && i < result.cell_texts.size(); ++i) cells[i]->content = result.cell_texts[i];
  result.degenerate = cells.empty();
  result.html = to_html(tree);
  return result;
}

std::vector<std::pair<std::string, std::string>> predict_dataset(const ModelParams& params, const NetConfig& config,
                                                                 const fs::path& dataset, const InferOptions& options) {
  auto records = load_records(dataset, options.split);
  std::vector<std::pair<std::string, std::string>> out(records.size());
  parallel_for(records.size(), options.threads, [&](std::size_t i) {
    GrayImage image = read_pgm(image_path(dataset, records[i].id));
    if (image.height != config.image_h || image.width != config.image_w) {
      throw Error(Errc::ConfigMismatch, records[i].id + ": image is " + std::to_string(image.height) + "x" +
                                            std::to_string(image.width) + ", checkpoint expects " +
                                            std::to_string(config.image_h) + "x" + std::to_string(config.image_w));
    }
    out[i] = {records[i].id, recognize(params, config, image_tensor(image)).html};
  });
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t infer_batch(const fs::path& dataset, const fs::path& checkpoint, const fs::path& out,
                        const InferOptions& options) {
  Checkpoint ck = load_checkpoint(checkpoint);
  auto preds = predict_dataset(ck.params, ck.net, dataset, options);
  std::vector<nlohmann::json> lines;
  lines.reserve(preds.size());
  for (const auto& [id, html] : preds) lines.push_back({{"id", id}, {"html", html}});
  write_jsonl(out, lines);
  return lines.size();
}

}  // namespace wstab

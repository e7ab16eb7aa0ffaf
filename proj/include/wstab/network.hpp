#pragma once

// Encoder / structure decoder / cell decoder.
//
// The encoder is a small residual CNN whose output grid is unfolded column by
// column into the memory sequence. The structure decoder is a stack of post-norm
// transformer decoder layers; the hidden vector it produces at every cell token
// (`<td></td>` or `<td`) conditions one run of the cell decoder, which adds it
// to every query position of the cell's character sequence.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "wstab/autodiff.hpp"
#include "wstab/tokenizer.hpp"

namespace wstab {

struct NetConfig {
  int image_h = 64;
  int image_w = 64;
  // channels[0] is the stem width; each further entry is one stride-2 stage.
  std::vector<int> channels{16, 32, 64, 64};
  int blocks_per_stage = 1;
  int downsample = 8;
  int d_model = 64;
  int n_heads = 2;
  int ff_dim = 256;
  int n_struct_layers = 2;
  int n_cell_layers = 1;
  int max_struct_len = 64;
  int max_cell_len = 16;
  std::string alphabet = "0123456789ABCDEFGHIJKLMNOP ";
  double dropout = 0.1;

  int grid_h() const { return image_h / downsample; }
  int grid_w() const { return image_w / downsample; }
  int memory_len() const { return grid_h() * grid_w(); }
  int feature_channels() const { return channels.back(); }
  int struct_vocab_size() const { return static_cast<int>(StructVocab::standard().size()); }
  int cell_vocab_size() const { return static_cast<int>(alphabet.size()) + 4; }

  /// Throws InvalidConfig.
  void validate() const;

  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

namespace nn {

struct Linear {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]
};

struct Norm {
  ad::Tensor gain;
  ad::Tensor bias;
};

struct Conv {
  ad::Tensor weight;  // [out, in, 3, 3]
  ad::Tensor bias;    // [out]
};

struct Attention {
  Linear query, key, value, output;
};

struct DecoderLayer {
  Attention self_attn;
  Norm norm1;
  Attention cross_attn;
  Norm norm2;
  Linear ff1, ff2;
  Norm norm3;
};

struct ResBlock {
  Conv conv1, conv2;
};

struct Stage {
  Conv down;
  std::vector<ResBlock> blocks;
};

}  // namespace nn

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

/// All trainable tensors. `parameters()` enumerates them in the fixed order
/// that defines the checkpoint layout:
///   backbone.stem, backbone.stage{s}.down, backbone.stage{s}.block{b}.conv{1,2}
///   (weight then bias), encoder.proj (only when channels differ from
///   d_model), struct.embed, cell.embed, struct.layer{l}.*, struct.out,
///   cell.layer{l}.*, cell.out. Within a decoder layer: self_attn
///   {query,key,value,output}, norm1, cross_attn{...}, norm2, ff1, ff2, norm3.
struct ModelParams {
  nn::Conv stem;
  std::vector<nn::Stage> stages;
  std::optional<nn::Linear> encoder_proj;
  ad::Tensor struct_embed;  // [V_struct, d]
  ad::Tensor cell_embed;    // [V_cell, d]
  std::vector<nn::DecoderLayer> struct_layers;
  nn::Linear struct_out;
  std::vector<nn::DecoderLayer> cell_layers;
  nn::Linear cell_out;

  /// Zero-initialized tensors shaped for `config`.
  static ModelParams zeros(const NetConfig& config);
  /// Fan-scaled uniform weights, N(0, d^-1/2) embeddings, unit norm gains,
  /// zero biases; fully determined by `seed`.
  static ModelParams initialize(const NetConfig& config, std::uint64_t seed);

  std::vector<NamedTensor> parameters() const;
  std::vector<ad::Tensor> tensors() const;
  std::size_t scalar_count() const;
  void set_requires_grad(bool on) const;
  void zero_grad() const;
  /// Deep copy with independent storage.
  ModelParams clone() const;
};

/// Layout of parameters() without allocating: names and shapes.
std::vector<std::pair<std::string, ad::Shape>> parameter_layout(const NetConfig& config);

/// Controls dropout. Evaluation contexts never drop.
class ForwardContext {
 public:
  static ForwardContext eval() { return ForwardContext(false, 0.0, 0); }
  static ForwardContext train(double dropout, std::uint64_t seed) { return ForwardContext(true, dropout, seed); }

  bool training() const { return training_; }
  ad::Tensor dropout(const ad::Tensor& x);

 private:
  ForwardContext(bool training, double p, std::uint64_t seed) : training_(training), p_(p), seed_(seed) {}
  bool training_;
  double p_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

struct FeatureGrid {
  ad::Tensor grid;      // backbone output [k, h', w']
  ad::Tensor sequence;  // [h'·w', d_model], column-major order, positional encoding added
  int height = 0;
  int width = 0;
};

/// Sinusoidal positional encoding rows [0, len) as a constant tensor [len, d].
ad::Tensor positional_encoding(int len, int d);

/// Additive attention masks with 0 for visible and -inf for hidden entries.
ad::Tensor causal_mask(int len);
/// Block-diagonal causal mask for concatenated sequences of the given lengths.
ad::Tensor segment_causal_mask(std::span<const int> lengths);

/// image: [H, W] with values in [0, 1].
FeatureGrid encode(const ModelParams& params, const NetConfig& config, const ad::Tensor& image, ForwardContext& ctx);

/// Keys and values of the encoder memory projected once per decoder layer.
struct DecoderMemory {
  std::vector<ad::Tensor> keys;
  std::vector<ad::Tensor> values;
};

DecoderMemory prepare_memory(std::span<const nn::DecoderLayer> layers, const ad::Tensor& memory);

struct StructureOutput {
  ad::Tensor logits;  // [t, V_struct]
  ad::Tensor hidden;  // [t, d_model], output of the top layer
};

StructureOutput structure_decoder_forward(const ModelParams& params, const NetConfig& config,
                                          const DecoderMemory& memory, std::span<const int> shifted_tokens,
                                          ForwardContext& ctx);
StructureOutput structure_decoder_forward(const ModelParams& params, const NetConfig& config,
                                          const FeatureGrid& memory, std::span<const int> shifted_tokens,
                                          ForwardContext& ctx);

/// One cell: `cell_hidden` is [d] or [1, d]; returns [u, V_cell].
ad::Tensor cell_decoder_forward(const ModelParams& params, const NetConfig& config, const DecoderMemory& memory,
                                const ad::Tensor& cell_hidden, std::span<const int> shifted_cell_tokens,
                                ForwardContext& ctx);
ad::Tensor cell_decoder_forward(const ModelParams& params, const NetConfig& config, const FeatureGrid& memory,
                                const ad::Tensor& cell_hidden, std::span<const int> shifted_cell_tokens,
                                ForwardContext& ctx);

/// Several cells in one pass. Sequences are concatenated and attend only
/// within themselves, which is equivalent to separate calls. hidden_rows is
/// [n_cells, d]; the result is [Σu, V_cell] in input order.
ad::Tensor cell_decoder_forward_batch(const ModelParams& params, const NetConfig& config,
                                      const DecoderMemory& memory, const ad::Tensor& hidden_rows,
                                      std::span<const TokenSeq> shifted_cells, ForwardContext& ctx);

/// Teacher-forced inputs and targets for one table.
struct TrainTargets {
  TokenSeq struct_targets;           // ends with <eos>
  std::vector<TokenSeq> cell_targets;  // one per cell, each ends with <eos>
};

struct TrainForward {
  ad::Tensor struct_logits;
  ad::Tensor struct_hidden;
  ad::Tensor cell_logits;          // [Σu, V_cell]; undefined when there are no cells
  std::vector<int> cell_offsets;   // row offsets into cell_logits, size n_cells + 1
  std::vector<int> cell_positions; // structure position that triggered each cell

  std::size_t cell_count() const { return cell_positions.size(); }
  /// Logit rows of one cell.
  ad::Tensor cell_block(std::size_t k) const;
};

/// Right-shift: <sos> followed by all but the last token.
TokenSeq shift_right(std::span<const int> targets);

/// Throws CellCountMismatch when the number of cell tokens in the structure
/// targets differs from the number of cell sequences, TooLong when a sequence
/// exceeds its configured maximum.
TrainForward forward_train(const ModelParams& params, const NetConfig& config, const ad::Tensor& image,
                           const TrainTargets& targets, ForwardContext& ctx);

}  // namespace wstab

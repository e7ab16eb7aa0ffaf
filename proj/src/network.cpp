#include "wstab/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "wstab/error.hpp"
#include "wstab/rng.hpp"

namespace wstab {

using ad::Shape;
using ad::Tensor;

void NetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
  if (image_h <= 0 || image_w <= 0) fail("image dimensions must be positive");
  if (channels.empty()) fail("backbone needs at least a stem channel count");
  for (int c : channels) {
    if (c <= 0) fail("channel counts must be positive");
  }
  if (blocks_per_stage < 0) fail("blocks_per_stage must be >= 0");
  int factor = 1 << (channels.size() - 1);
  if (downsample != factor) {
    fail("downsample " + std::to_string(downsample) + " does not match " + std::to_string(channels.size() - 1) +
         " stride-2 stages");
  }
  if (image_h % downsample != 0 || image_w % downsample != 0) fail("downsample factor must divide both image dims");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (ff_dim <= 0) fail("ff_dim must be positive");
  if (n_struct_layers < 1 || n_cell_layers < 1) fail("each decoder needs at least one layer");
  if (max_struct_len < 2 || max_cell_len < 1) fail("sequence limits too small");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
  CellVocab check(alphabet);  // throws on duplicate characters
  (void)check;
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"image_h", c.image_h},
                     {"image_w", c.image_w},
                     {"channels", c.channels},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"downsample", c.downsample},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"ff_dim", c.ff_dim},
                     {"n_struct_layers", c.n_struct_layers},
                     {"n_cell_layers", c.n_cell_layers},
                     {"max_struct_len", c.max_struct_len},
                     {"max_cell_len", c.max_cell_len},
                     {"alphabet", c.alphabet},
                     {"dropout", c.dropout},
                     {"struct_vocab_size", c.struct_vocab_size()},
                     {"cell_vocab_size", c.cell_vocab_size()}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.channels = j.value("channels", c.channels);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.downsample = j.value("downsample", c.downsample);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.n_struct_layers = j.value("n_struct_layers", c.n_struct_layers);
  c.n_cell_layers = j.value("n_cell_layers", c.n_cell_layers);
  c.max_struct_len = j.value("max_struct_len", c.max_struct_len);
  c.max_cell_len = j.value("max_cell_len", c.max_cell_len);
  c.alphabet = j.value("alphabet", c.alphabet);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("struct_vocab_size") && j["struct_vocab_size"].get<int>() != c.struct_vocab_size()) {
    throw Error(Errc::ConfigMismatch, "structure vocabulary size differs from this build");
  }
  if (j.contains("cell_vocab_size") && j["cell_vocab_size"].get<int>() != c.cell_vocab_size()) {
    throw Error(Errc::ConfigMismatch, "cell vocabulary size does not match the alphabet");
  }
}

// ---- parameters -----------------------------------------------------------

namespace {

enum class Init { Zero, One, Uniform, Normal };

struct Spec {
  std::string name;
  Shape shape;
  Init init;
  double scale;  // uniform bound or normal stddev
};

void add_linear(std::vector<Spec>& out, const std::string& name, int in, int outd) {
  out.push_back({name + ".weight", {in, outd}, Init::Uniform, std::sqrt(6.0 / (in + outd))});
  out.push_back({name + ".bias", {outd}, Init::Zero, 0});
}

void add_norm(std::vector<Spec>& out, const std::string& name, int d) {
  out.push_back({name + ".gain", {d}, Init::One, 0});
  out.push_back({name + ".bias", {d}, Init::Zero, 0});
}

void add_conv(std::vector<Spec>& out, const std::string& name, int in, int outc, double gain = 1.0) {
  out.push_back({name + ".weight", {outc, in, 3, 3}, Init::Uniform, gain * std::sqrt(6.0 / (in * 9))});
  out.push_back({name + ".bias", {outc}, Init::Zero, 0});
}

void add_layer(std::vector<Spec>& out, const std::string& name, const NetConfig& c) {
  for (const char* attn : {"self_attn", "cross_attn"}) {
    std::string base = name + "." + attn;
    for (const char* proj : {"query", "key", "value", "output"}) add_linear(out, base + "." + proj, c.d_model, c.d_model);
    add_norm(out, name + (std::string(attn) == "self_attn" ? ".norm1" : ".norm2"), c.d_model);
  }
  add_linear(out, name + ".ff1", c.d_model, c.ff_dim);
  add_linear(out, name + ".ff2", c.ff_dim, c.d_model);
  add_norm(out, name + ".norm3", c.d_model);
}

std::vector<Spec> layout_specs(const NetConfig& c) {
  c.validate();
  std::vector<Spec> out;
  add_conv(out, "backbone.stem", 1, c.channels[0]);
  for (std::size_t s = 1; s < c.channels.size(); ++s) {
    std::string stage = "backbone.stage" + std::to_string(s);
    add_conv(out, stage + ".down", c.channels[s - 1], c.channels[s]);
    for (int b = 0; b < c.blocks_per_stage; ++b) {
      std::string block = stage + ".block" + std::to_string(b);
      add_conv(out, block + ".conv1", c.channels[s], c.channels[s]);
      // second conv starts small so each residual block begins near identity
      add_conv(out, block + ".conv2", c.channels[s], c.channels[s], 0.1);
    }
  }
  if (c.feature_channels() != c.d_model) add_linear(out, "encoder.proj", c.feature_channels(), c.d_model);
  double emb_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  out.push_back({"struct.embed", {c.struct_vocab_size(), c.d_model}, Init::Normal, emb_std});
  out.push_back({"cell.embed", {c.cell_vocab_size(), c.d_model}, Init::Normal, emb_std});
  for (int l = 0; l < c.n_struct_layers; ++l) add_layer(out, "struct.layer" + std::to_string(l), c);
  add_linear(out, "struct.out", c.d_model, c.struct_vocab_size());
  for (int l = 0; l < c.n_cell_layers; ++l) add_layer(out, "cell.layer" + std::to_string(l), c);
  add_linear(out, "cell.out", c.d_model, c.cell_vocab_size());
  return out;
}

// Hands out tensors in layout order while the structured fields are filled.
class Filler {
 public:
  explicit Filler(std::vector<Tensor> tensors) : tensors_(std::move(tensors)) {}
  Tensor next() { return tensors_.at(pos_++); }
  nn::Linear linear() {
    auto w = next();
    return {w, next()};
  }
  nn::Norm norm() {
    auto g = next();
    return {g, next()};
  }
  nn::Conv conv() {
    auto w = next();
    return {w, next()};
  }
  nn::Attention attention() {
    nn::Attention a;
    a.query = linear();
    a.key = linear();
    a.value = linear();
    a.output = linear();
    return a;
  }
  nn::DecoderLayer layer() {
    nn::DecoderLayer l;
    l.self_attn = attention();
    l.norm1 = norm();
    l.cross_attn = attention();
    l.norm2 = norm();
    l.ff1 = linear();
    l.ff2 = linear();
    l.norm3 = norm();
    return l;
  }
  bool done() const { return pos_ == tensors_.size(); }

 private:
  std::vector<Tensor> tensors_;
  std::size_t pos_ = 0;
};

ModelParams assemble(const NetConfig& c, std::vector<Tensor> tensors) {
  Filler f(std::move(tensors));
  ModelParams p;
  p.stem = f.conv();
  for (std::size_t s = 1; s < c.channels.size(); ++s) {
    nn::Stage stage;
    stage.down = f.conv();
    for (int b = 0; b < c.blocks_per_stage; ++b) {
      nn::ResBlock block;
      block.conv1 = f.conv();
      block.conv2 = f.conv();
      stage.blocks.push_back(block);
    }
    p.stages.push_back(std::move(stage));
  }
  if (c.feature_channels() != c.d_model) p.encoder_proj = f.linear();
  p.struct_embed = f.next();
  p.cell_embed = f.next();
  for (int l = 0; l < c.n_struct_layers; ++l) p.struct_layers.push_back(f.layer());
  p.struct_out = f.linear();
  for (int l = 0; l < c.n_cell_layers; ++l) p.cell_layers.push_back(f.layer());
  p.cell_out = f.linear();
  if (!f.done()) throw Error(Errc::ShapeMismatch, "parameter layout mismatch");
  return p;
}

void push_linear(std::vector<Tensor>& out, const nn::Linear& l) {
  out.push_back(l.weight);
  out.push_back(l.bias);
}

void push_layer(std::vector<Tensor>& out, const nn::DecoderLayer& l) {
  for (const auto* a : {&l.self_attn, &l.cross_attn}) {
    push_linear(out, a->query);
    push_linear(out, a->key);
    push_linear(out, a->value);
    push_linear(out, a->output);
    const auto& n = a == &l.self_attn ? l.norm1 : l.norm2;
    out.push_back(n.gain);
    out.push_back(n.bias);
  }
  push_linear(out, l.ff1);
  push_linear(out, l.ff2);
  out.push_back(l.norm3.gain);
  out.push_back(l.norm3.bias);
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const NetConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : layout_specs(config)) out.emplace_back(std::move(s.name), std::move(s.shape));
  return out;
}

ModelParams ModelParams::zeros(const NetConfig& config) {
  std::vector<Tensor> tensors;
  for (const auto& s : layout_specs(config)) tensors.emplace_back(s.shape, false);
  return assemble(config, std::move(tensors));
}

ModelParams ModelParams::initialize(const NetConfig& config, std::uint64_t seed) {
  std::vector<Tensor> tensors;
  auto specs = layout_specs(config);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    Tensor t(s.shape, false);
    Rng rng(mix_seed(seed, i));
    for (auto& v : t.mutable_data()) {
      switch (s.init) {
        case Init::Zero: v = 0; break;
        case Init::One: v = 1; break;
        case Init::Uniform: v = rng.uniform(-s.scale, s.scale); break;
        case Init::Normal: v = rng.normal() * s.scale; break;
      }
    }
    tensors.push_back(std::move(t));
  }
  return assemble(config, std::move(tensors));
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  out.push_back(stem.weight);
  out.push_back(stem.bias);
  for (const auto& stage : stages) {
    out.push_back(stage.down.weight);
    out.push_back(stage.down.bias);
    for (const auto& b : stage.blocks) {
      out.push_back(b.conv1.weight);
      out.push_back(b.conv1.bias);
      out.push_back(b.conv2.weight);
      out.push_back(b.conv2.bias);
    }
  }
  if (encoder_proj) push_linear(out, *encoder_proj);
  out.push_back(struct_embed);
  out.push_back(cell_embed);
  for (const auto& l : struct_layers) push_layer(out, l);
  push_linear(out, struct_out);
  for (const auto& l : cell_layers) push_layer(out, l);
  push_linear(out, cell_out);
  return out;
}

std::vector<NamedTensor> ModelParams::parameters() const {
  auto tensors_v = tensors();
  // Names are derived from the shapes' owning config; rebuild it from the
  // structure to avoid storing a config here.
  std::vector<NamedTensor> out;
  std::vector<std::string> names;
  names.push_back("backbone.stem.weight");
  names.push_back("backbone.stem.bias");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    std::string stage = "backbone.stage" + std::to_string(s + 1);
    names.push_back(stage + ".down.weight");
    names.push_back(stage + ".down.bias");
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      std::string block = stage + ".block" + std::to_string(b);
      for (const char* conv : {".conv1", ".conv2"}) {
        names.push_back(block + conv + ".weight");
        names.push_back(block + conv + ".bias");
      }
    }
  }
  auto linear_names = [&](const std::string& base) {
    names.push_back(base + ".weight");
    names.push_back(base + ".bias");
  };
  auto layer_names = [&](const std::string& base) {
    for (const char* attn : {"self_attn", "cross_attn"}) {
      for (const char* proj : {"query", "key", "value", "output"}) linear_names(base + "." + attn + "." + proj);
      std::string norm = std::string(attn) == "self_attn" ? ".norm1" : ".norm2";
      names.push_back(base + norm + ".gain");
      names.push_back(base + norm + ".bias");
    }
    linear_names(base + ".ff1");
    linear_names(base + ".ff2");
    names.push_back(base + ".norm3.gain");
    names.push_back(base + ".norm3.bias");
  };
  if (encoder_proj) linear_names("encoder.proj");
  names.push_back("struct.embed");
  names.push_back("cell.embed");
  for (std::size_t l = 0; l < struct_layers.size(); ++l) layer_names("struct.layer" + std::to_string(l));
  linear_names("struct.out");
  for (std::size_t l = 0; l < cell_layers.size(); ++l) layer_names("cell.layer" + std::to_string(l));
  linear_names("cell.out");
  for (std::size_t i = 0; i < tensors_v.size(); ++i) out.push_back({names.at(i), tensors_v[i]});
  return out;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

void ModelParams::set_requires_grad(bool on) const {
  for (auto t : tensors()) t.set_requires_grad(on);
}

void ModelParams::zero_grad() const {
  for (auto t : tensors()) t.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  auto src = tensors();
  std::vector<Tensor> fresh;
  for (const auto& t : src) fresh.push_back(t.clone(t.requires_grad()));
  // reassemble by walking the same structure
  std::size_t i = 0;
  auto take = [&](Tensor& t) { t = fresh.at(i++); };
  auto take_linear = [&](nn::Linear& l) {
    take(l.weight);
    take(l.bias);
  };
  auto take_layer = [&](nn::DecoderLayer& l) {
    for (auto* a : {&l.self_attn, &l.cross_attn}) {
      take_linear(a->query);
      take_linear(a->key);
      take_linear(a->value);
      take_linear(a->output);
      auto& n = a == &l.self_attn ? l.norm1 : l.norm2;
      take(n.gain);
      take(n.bias);
    }
    take_linear(l.ff1);
    take_linear(l.ff2);
    take(l.norm3.gain);
    take(l.norm3.bias);
  };
  take(copy.stem.weight);
  take(copy.stem.bias);
  for (auto& stage : copy.stages) {
    take(stage.down.weight);
    take(stage.down.bias);
    for (auto& b : stage.blocks) {
      take(b.conv1.weight);
      take(b.conv1.bias);
      take(b.conv2.weight);
      take(b.conv2.bias);
    }
  }
  if (copy.encoder_proj) take_linear(*copy.encoder_proj);
  take(copy.struct_embed);
  take(copy.cell_embed);
  for (auto& l : copy.struct_layers) take_layer(l);
  take_linear(copy.struct_out);
  for (auto& l : copy.cell_layers) take_layer(l);
  take_linear(copy.cell_out);
  return copy;
}

// ---- building blocks ------------------------------------------------------

Tensor ForwardContext::dropout(const Tensor& x) {
  if (!training_ || p_ <= 0) return x;
  return ad::dropout(x, p_, mix_seed(seed_, counter_++));
}

Tensor positional_encoding(int len, int d) {
  Tensor pe({len, d});
  auto v = pe.mutable_data();
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      v[static_cast<std::size_t>(pos) * d + i] = std::sin(pos * freq);
      if (i + 1 < d) v[static_cast<std::size_t>(pos) * d + i + 1] = std::cos(pos * freq);
    }
  }
  return pe;
}

Tensor causal_mask(int len) {
  int lengths[] = {len};
  return segment_causal_mask(lengths);
}

Tensor segment_causal_mask(std::span<const int> lengths) {
  int total = 0;
  for (int l : lengths) total += l;
  Tensor mask({total, total});
  auto v = mask.mutable_data();
  std::fill(v.begin(), v.end(), -std::numeric_limits<ad::Real>::infinity());
  int start = 0;
  for (int l : lengths) {
    for (int i = 0; i < l; ++i) {
      for (int j = 0; j <= i; ++j) v[static_cast<std::size_t>(start + i) * total + start + j] = 0;
    }
    start += l;
  }
  return mask;
}

namespace {

Tensor linear(const nn::Linear& l, const Tensor& x) { return ad::add_rowvec(ad::matmul(x, l.weight), l.bias); }

Tensor conv(const nn::Conv& c, const Tensor& x, int stride) {
  return ad::add_channel_bias(ad::conv2d(x, c.weight, stride, 1), c.bias);
}

Tensor norm(const nn::Norm& n, const Tensor& x) { return ad::layer_norm(x, n.gain, n.bias, 1e-5); }

// Multi-head scaled dot-product attention with precomputed keys/values.
Tensor attend(const nn::Attention& a, const Tensor& x, const Tensor& keys, const Tensor& values, const Tensor* mask,
              int heads) {
  Tensor q = linear(a.query, x);
  int d = q.dim(1);
  int dk = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : ad::slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = heads == 1 ? keys : ad::slice_cols(keys, h * dk, (h + 1) * dk);
    Tensor vh = heads == 1 ? values : ad::slice_cols(values, h * dk, (h + 1) * dk);
    Tensor scores = ad::scale(ad::matmul_nt(qh, kh), scale);
    if (mask) scores = ad::add(scores, *mask);
    outs.push_back(ad::matmul(ad::softmax(scores, -1), vh));
  }
  Tensor merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return linear(a.output, merged);
}

Tensor decoder_layer(const nn::DecoderLayer& l, const Tensor& x, const Tensor& mask, const Tensor& mem_k,
                     const Tensor& mem_v, int heads, ForwardContext& ctx) {
  Tensor self_k = linear(l.self_attn.key, x);
  Tensor self_v = linear(l.self_attn.value, x);
  Tensor h = norm(l.norm1, ad::add(x, ctx.dropout(attend(l.self_attn, x, self_k, self_v, &mask, heads))));
  h = norm(l.norm2, ad::add(h, ctx.dropout(attend(l.cross_attn, h, mem_k, mem_v, nullptr, heads))));
  Tensor ff = linear(l.ff2, ad::gelu(linear(l.ff1, h)));
  return norm(l.norm3, ad::add(h, ctx.dropout(ff)));
}

Tensor embed_tokens(const Tensor& table, std::span<const int> ids, std::span<const int> positions, int d) {
  Tensor pe = positional_encoding(*std::max_element(positions.begin(), positions.end()) + 1, d);
  Tensor pos_rows = ad::embed(pe, positions);
  return ad::add(ad::scale(ad::embed(table, ids), std::sqrt(static_cast<double>(d))), pos_rows);
}

void check_len(std::size_t len, int limit, const char* what) {
  if (len == 0) throw Error(Errc::ShapeMismatch, std::string(what) + ": empty input sequence");
  if (len > static_cast<std::size_t>(limit)) {
    throw Error(Errc::TooLong, std::string(what) + ": " + std::to_string(len) + " tokens exceed " +
                                   std::to_string(limit));
  }
}

}  // namespace

FeatureGrid encode(const ModelParams& params, const NetConfig& config, const Tensor& image, ForwardContext& ctx) {
  if (image.rank() != 2 || image.dim(0) != config.image_h || image.dim(1) != config.image_w) {
    throw Error(Errc::ShapeMismatch, "image " + ad::shape_str(image.shape()) + " but model expects [" +
                                         std::to_string(config.image_h) + "," + std::to_string(config.image_w) + "]");
  }
  Tensor x = ad::reshape(image, {1, config.image_h, config.image_w});
  x = ad::gelu(conv(params.stem, x, 1));
  for (const auto& stage : params.stages) {
    x = ad::gelu(conv(stage.down, x, 2));
    for (const auto& block : stage.blocks) {
      Tensor branch = conv(block.conv2, ad::gelu(conv(block.conv1, x, 1)), 1);
      x = ad::gelu(ad::add(x, branch));
    }
  }
  FeatureGrid out;
  out.grid = x;
  out.height = x.dim(1);
  out.width = x.dim(2);
  Tensor seq = ad::flatten_column_major(x);
  if (params.encoder_proj) seq = linear(*params.encoder_proj, seq);
  seq = ad::add(seq, positional_encoding(seq.dim(0), config.d_model));
  out.sequence = ctx.dropout(seq);
  return out;
}

DecoderMemory prepare_memory(std::span<const nn::DecoderLayer> layers, const Tensor& memory) {
  DecoderMemory m;
  for (const auto& l : layers) {
    m.keys.push_back(linear(l.cross_attn.key, memory));
    m.values.push_back(linear(l.cross_attn.value, memory));
  }
  return m;
}

StructureOutput structure_decoder_forward(const ModelParams& params, const NetConfig& config,
                                          const DecoderMemory& memory, std::span<const int> shifted_tokens,
                                          ForwardContext& ctx) {
  check_len(shifted_tokens.size(), config.max_struct_len, "structure decoder");
  int t = static_cast<int>(shifted_tokens.size());
  std::vector<int> positions(static_cast<std::size_t>(t));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = ctx.dropout(embed_tokens(params.struct_embed, shifted_tokens, positions, config.d_model));
  Tensor mask = causal_mask(t);
  for (std::size_t l = 0; l < params.struct_layers.size(); ++l) {
    x = decoder_layer(params.struct_layers[l], x, mask, memory.keys.at(l), memory.values.at(l), config.n_heads, ctx);
  }
  return {linear(params.struct_out, x), x};
}

StructureOutput structure_decoder_forward(const ModelParams& params, const NetConfig& config,
                                          const FeatureGrid& memory, std::span<const int> shifted_tokens,
                                          ForwardContext& ctx) {
  return structure_decoder_forward(params, config, prepare_memory(params.struct_layers, memory.sequence),
                                   shifted_tokens, ctx);
}

Tensor cell_decoder_forward_batch(const ModelParams& params, const NetConfig& config, const DecoderMemory& memory,
                                  const Tensor& hidden_rows, std::span<const TokenSeq> shifted_cells,
                                  ForwardContext& ctx) {
  if (hidden_rows.rank() != 2 || hidden_rows.dim(0) != static_cast<int>(shifted_cells.size()) ||
      hidden_rows.dim(1) != config.d_model) {
    throw Error(Errc::ShapeMismatch, "cell decoder: hidden rows " + ad::shape_str(hidden_rows.shape()) + " for " +
                                         std::to_string(shifted_cells.size()) + " cells");
  }
  std::vector<int> ids, positions, segment, lengths;
  for (std::size_t k = 0; k < shifted_cells.size(); ++k) {
    const auto& cell = shifted_cells[k];
    check_len(cell.size(), config.max_cell_len, "cell decoder");
    for (std::size_t i = 0; i < cell.size(); ++i) {
      ids.push_back(cell[i]);
      positions.push_back(static_cast<int>(i));
      segment.push_back(static_cast<int>(k));
    }
    lengths.push_back(static_cast<int>(cell.size()));
  }
  Tensor x = embed_tokens(params.cell_embed, ids, positions, config.d_model);
  x = ctx.dropout(ad::add(x, ad::embed(hidden_rows, segment)));
  Tensor mask = segment_causal_mask(lengths);
  for (std::size_t l = 0; l < params.cell_layers.size(); ++l) {
    x = decoder_layer(params.cell_layers[l], x, mask, memory.keys.at(l), memory.values.at(l), config.n_heads, ctx);
  }
  return linear(params.cell_out, x);
}

Tensor cell_decoder_forward(const ModelParams& params, const NetConfig& config, const DecoderMemory& memory,
                            const Tensor& cell_hidden, std::span<const int> shifted_cell_tokens, ForwardContext& ctx) {
  if (cell_hidden.size() != static_cast<std::size_t>(config.d_model)) {
    throw Error(Errc::ShapeMismatch, "cell hidden " + ad::shape_str(cell_hidden.shape()));
  }
  Tensor row = cell_hidden.rank() == 2 ? cell_hidden : ad::reshape(cell_hidden, {1, config.d_model});
  TokenSeq seq(shifted_cell_tokens.begin(), shifted_cell_tokens.end());
  return cell_decoder_forward_batch(params, config, memory, row, std::span<const TokenSeq>(&seq, 1), ctx);
}

Tensor cell_decoder_forward(const ModelParams& params, const NetConfig& config, const FeatureGrid& memory,
                            const Tensor& cell_hidden, std::span<const int> shifted_cell_tokens, ForwardContext& ctx) {
  return cell_decoder_forward(params, config, prepare_memory(params.cell_layers, memory.sequence), cell_hidden,
                              shifted_cell_tokens, ctx);
}

TokenSeq shift_right(std::span<const int> targets) {
  TokenSeq out;
  out.reserve(targets.size());
  out.push_back(kSos);
  for (std::size_t i = 0; i + 1 < targets.size(); ++i) out.push_back(targets[i]);
  return out;
}

Tensor TrainForward::cell_block(std::size_t k) const {
  return ad::slice_rows(cell_logits, cell_offsets.at(k), cell_offsets.at(k + 1));
}

TrainForward forward_train(const ModelParams& params, const NetConfig& config, const Tensor& image,
                           const TrainTargets& targets, ForwardContext& ctx) {
  const auto& vocab = StructVocab::standard();
  TrainForward out;
  for (std::size_t i = 0; i < targets.struct_targets.size(); ++i) {
    if (vocab.is_cell_token(targets.struct_targets[i])) out.cell_positions.push_back(static_cast<int>(i));
  }
  if (out.cell_positions.size() != targets.cell_targets.size()) {
    throw Error(Errc::CellCountMismatch, std::to_string(out.cell_positions.size()) + " cell tokens but " +
                                             std::to_string(targets.cell_targets.size()) + " cell sequences");
  }
  FeatureGrid grid = encode(params, config, image, ctx);
  auto struct_memory = prepare_memory(params.struct_layers, grid.sequence);
  auto structure = structure_decoder_forward(params, config, struct_memory, shift_right(targets.struct_targets), ctx);
  out.struct_logits = structure.logits;
  out.struct_hidden = structure.hidden;
  out.cell_offsets.push_back(0);
  if (out.cell_positions.empty()) return out;

  std::vector<TokenSeq> shifted;
  for (const auto& cell : targets.cell_targets) {
    shifted.push_back(shift_right(cell));
    out.cell_offsets.push_back(out.cell_offsets.back() + static_cast<int>(cell.size()));
  }
  Tensor hidden_rows = ad::embed(structure.hidden, out.cell_positions);
  auto cell_memory = prepare_memory(params.cell_layers, grid.sequence);
  out.cell_logits = cell_decoder_forward_batch(params, config, cell_memory, hidden_rows, shifted, ctx);
  return out;
}

}  // namespace wstab

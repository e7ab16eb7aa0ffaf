#include "wstab/presets.hpp"

#include "wstab/error.hpp"
#include "wstab/rng.hpp"

namespace wstab {

Preset preset(std::string_view name) {
  Preset p;
  if (name == "desk") return p;
  if (name == "tiny") {
    p.net.image_h = 8;
    p.net.image_w = 8;
    p.net.channels = {4, 8};
    p.net.blocks_per_stage = 1;
    p.net.downsample = 2;
    p.net.d_model = 16;
    p.net.n_heads = 2;
    p.net.ff_dim = 32;
    p.net.n_struct_layers = 1;
    p.net.n_cell_layers = 1;
    p.net.max_struct_len = 32;
    p.net.max_cell_len = 8;
    p.net.alphabet = "0123456789";
    p.net.dropout = 0.0;
    p.train.lr_schedule = {{2, 1e-3}};
    p.train.batch_size = 4;
    p.gen.image_h = 8;
    p.gen.image_w = 8;
    p.gen.max_rows = 2;
    p.gen.max_cols = 2;
    p.gen.max_text_len = 0;  // glyphs do not fit into 8x8 images
    p.gen.alphabet = p.net.alphabet;
    return p;
  }
  if (name == "paper") {
    p.net.image_h = 480;
    p.net.image_w = 480;
    p.net.channels = {64, 128, 256, 512};
    p.net.blocks_per_stage = 2;
    p.net.downsample = 8;
    p.net.d_model = 512;
    p.net.n_heads = 8;
    p.net.ff_dim = 2048;
    p.net.n_struct_layers = 3;
    p.net.n_cell_layers = 1;
    p.net.max_struct_len = 500;
    p.net.max_cell_len = 150;
    p.net.alphabet = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ .,-+:/%()$=";
    p.train.lambda = 0.5;
    p.train.lr_schedule = {{12, 1e-3}, {5, 1e-4}};
    p.train.batch_size = 8;
    p.gen.image_h = 480;
    p.gen.image_w = 480;
    p.gen.min_rows = 2;
    p.gen.max_rows = 20;
    p.gen.min_cols = 2;
    p.gen.max_cols = 10;
    p.gen.max_text_len = 6;
    p.gen.alphabet = p.net.alphabet;
    return p;
  }
  throw Error(Errc::InvalidConfig, "unknown preset \"" + std::string(name) + "\" (expected tiny, desk or paper)");
}

ad::GradCheckReport model_grad_check(const NetConfig& net, double lambda, std::uint64_t seed, double h, double tol) {
  auto params = ModelParams::initialize(net, seed);
  params.set_requires_grad(true);
  ad::Tensor image({net.image_h, net.image_w});
  Rng rng(mix_seed(seed, 1));
  for (auto& v : image.mutable_data()) v = rng.uniform();

  TableTree tree = parse_html("<table><tbody><tr><td colspan=\"2\">1</td></tr><tr><td>23</td><td></td></tr></tbody></table>");
  TrainTargets targets;
  targets.struct_targets = tokenize_structure(tree);
  CellVocab cells(net.alphabet);
  for (const TableNode* c : tree.cells()) targets.cell_targets.push_back(tokenize_cell(c->content, cells).ids);

  auto f = [&] {
    auto ctx = ForwardContext::eval();
    auto fwd = forward_train(params, net, image, targets, ctx);
    std::vector<ad::Tensor> blocks;
    for (std::size_t k = 0; k < fwd.cell_count(); ++k) blocks.push_back(fwd.cell_block(k));
    return loss_total(fwd.struct_logits, targets.struct_targets, blocks, targets.cell_targets, lambda).total;
  };
  auto tensors = params.tensors();
  return ad::grad_check(f, tensors, h, tol);
}

}  // namespace wstab

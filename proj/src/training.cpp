#include "wstab/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "wstab/checkpoint.hpp"
#include "wstab/error.hpp"
#include "wstab/inference.hpp"
#include "wstab/rng.hpp"
#include "wstab/teds.hpp"

namespace wstab {

namespace fs = std::filesystem;

int TrainConfig::total_epochs() const {
  int n = 0;
  for (const auto& s : lr_schedule) n += s.epochs;
  return n;
}

double TrainConfig::lr_at(int epoch) const {
  int end = 0;
  for (const auto& s : lr_schedule) {
    end += s.epochs;
    if (epoch <= end) return s.lr;
  }
  return lr_schedule.back().lr;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
  if (!(lambda >= 0 && lambda <= 1)) fail("lambda must be in [0, 1]");
  if (lr_schedule.empty()) fail("lr_schedule is empty");
  for (const auto& s : lr_schedule) {
    if (s.epochs < 1) fail("every lr stage needs at least one epoch");
    if (!(s.lr > 0)) fail("learning rates must be positive");
  }
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (grad_clip && !(*grad_clip > 0)) fail("grad_clip must be positive");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (time_limit_s < 0) fail("time_limit_s must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& s : c.lr_schedule) schedule.push_back({{"epochs", s.epochs}, {"lr", s.lr}});
  j = nlohmann::json{{"lambda", c.lambda},
                     {"lr_schedule", schedule},
                     {"batch_size", c.batch_size},
                     {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                     {"seed", c.seed},
                     {"grad_clip", c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr)},
                     {"early_stop_patience", c.early_stop_patience},
                     {"val_split", c.val_split},
                     {"time_limit_s", c.time_limit_s}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lambda = j.value("lambda", c.lambda);
  if (j.contains("lr_schedule")) {
    c.lr_schedule.clear();
    for (const auto& s : j["lr_schedule"]) {
      if (s.is_array()) {
        c.lr_schedule.push_back({s.at(0).get<int>(), s.at(1).get<double>()});
      } else {
        c.lr_schedule.push_back({s.at("epochs").get<int>(), s.at("lr").get<double>()});
      }
    }
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) {
    auto name = j["optimizer"].get<std::string>();
    if (name == "adam") c.optimizer = OptimizerKind::Adam;
    else if (name == "sgd") c.optimizer = OptimizerKind::Sgd;
    else throw Error(Errc::InvalidConfig, "optimizer must be \"adam\" or \"sgd\", got \"" + name + "\"");
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("grad_clip")) {
    if (j["grad_clip"].is_null()) c.grad_clip.reset();
    else c.grad_clip = j["grad_clip"].get<double>();
  }
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.val_split = j.value("val_split", c.val_split);
  c.time_limit_s = j.value("time_limit_s", c.time_limit_s);
}

LossResult loss_total(const ad::Tensor& struct_logits, std::span<const int> struct_targets,
                      std::span<const ad::Tensor> cell_logits, std::span<const TokenSeq> cell_targets, double lambda) {
  if (cell_logits.size() != cell_targets.size()) {
    throw Error(Errc::Misaligned, std::to_string(cell_logits.size()) + " cell logit blocks for " +
                                      std::to_string(cell_targets.size()) + " cell target sequences");
  }
  LossResult r;
  ad::Tensor l_struc = ad::cross_entropy(struct_logits, struct_targets, kPad, ad::Reduction::Mean);
  r.l_struc = l_struc.item();

  std::vector<int> pooled;
  for (std::size_t k = 0; k < cell_targets.size(); ++k) {
    if (cell_logits[k].rank() != 2 || cell_logits[k].dim(0) != static_cast<int>(cell_targets[k].size())) {
      throw Error(Errc::Misaligned, "cell " + std::to_string(k) + ": logits " + ad::shape_str(cell_logits[k].shape()) +
                                        " for " + std::to_string(cell_targets[k].size()) + " targets");
    }
    pooled.insert(pooled.end(), cell_targets[k].begin(), cell_targets[k].end());
  }
  if (ad::count_targets(pooled, kPad) == 0) {
    r.no_cells = true;
    r.total = ad::scale(l_struc, lambda);
    return r;
  }
  ad::Tensor l_cell = ad::cross_entropy(ad::concat_rows(cell_logits), pooled, kPad, ad::Reduction::Mean);
  r.l_cell = l_cell.item();
  r.total = ad::add(ad::scale(l_struc, lambda), ad::scale(l_cell, 1.0 - lambda));
  return r;
}

double clip_grad_norm(std::span<const ad::Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    double factor = max_norm / norm;
    for (auto p : params) {
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

Optimizer::Optimizer(OptimizerKind kind, std::vector<ad::Tensor> params, double beta1, double beta2, double eps)
    : kind_(kind), params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (kind_ == OptimizerKind::Adam) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
}

void Optimizer::step(double lr) {
  ++t_;
  if (kind_ == OptimizerKind::Sgd) {
    for (auto& p : params_) {
      auto g = p.grad();
      auto v = p.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
    return;
  }
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto g = params_[k].grad();
    auto v = params_[k].mutable_data();
    auto& m1 = m_[k];
    auto& m2 = v_[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      m1[i] = beta1_ * m1[i] + (1 - beta1_) * g[i];
      m2[i] = beta2_ * m2[i] + (1 - beta2_) * g[i] * g[i];
      v[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps_);
    }
  }
}

namespace {

std::size_t argmax_hits(const ad::Tensor& logits, std::span<const int> targets) {
  int v = logits.dim(1);
  auto data = logits.data();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    auto row = data.subspan(r * static_cast<std::size_t>(v), static_cast<std::size_t>(v));
    auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == targets[r] ? 1 : 0;
  }
  return hits;
}

}  // namespace

Trainer::Trainer(NetConfig net, TrainConfig train, ModelParams params)
    : net_(std::move(net)),
      train_(std::move(train)),
      params_(std::move(params)),
      tensors_(params_.tensors()),
      optimizer_(train_.optimizer, tensors_) {
  net_.validate();
  train_.validate();
  params_.set_requires_grad(true);
}

StepStats Trainer::step(std::span<const Sample* const> batch, double lr, std::uint64_t step_seed) {
  StepStats stats;
  std::vector<std::vector<int>> pooled_cells(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i]->targets;
    stats.struct_tokens += ad::count_targets(t.struct_targets, kPad);
    for (const auto& c : t.cell_targets) pooled_cells[i].insert(pooled_cells[i].end(), c.begin(), c.end());
    stats.cell_tokens += ad::count_targets(pooled_cells[i], kPad);
  }
  if (stats.struct_tokens == 0) throw Error(Errc::EmptyAfterIgnore, "batch has no structure targets");
  stats.no_cells = stats.cell_tokens == 0;
  double lambda = train_.lambda;
  double w_struc = lambda / static_cast<double>(stats.struct_tokens);
  double w_cell = stats.no_cells ? 0.0 : (1.0 - lambda) / static_cast<double>(stats.cell_tokens);

  params_.zero_grad();
  double sum_struc = 0, sum_cell = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    ad::Tape tape;
    ad::TapeScope scope(tape);
    auto ctx = ForwardContext::train(net_.dropout, mix_seed(step_seed, i));
    auto fwd = forward_train(params_, net_, s.image, s.targets, ctx);
    auto ce_struc = ad::cross_entropy(fwd.struct_logits, s.targets.struct_targets, kPad, ad::Reduction::Sum);
    sum_struc += ce_struc.item();
    stats.struct_correct += argmax_hits(fwd.struct_logits, s.targets.struct_targets);
    ad::Tensor loss = ad::scale(ce_struc, w_struc);
    if (fwd.cell_count() > 0 && ad::count_targets(pooled_cells[i], kPad) > 0) {
      auto ce_cell = ad::cross_entropy(fwd.cell_logits, pooled_cells[i], kPad, ad::Reduction::Sum);
      sum_cell += ce_cell.item();
      stats.cell_correct += argmax_hits(fwd.cell_logits, pooled_cells[i]);
      loss = ad::add(loss, ad::scale(ce_cell, w_cell));
    }
    tape.backward(loss);
  }
  stats.l_struc = sum_struc / static_cast<double>(stats.struct_tokens);
  stats.l_cell = stats.no_cells ? 0.0 : sum_cell / static_cast<double>(stats.cell_tokens);
  stats.loss = lambda * stats.l_struc + (stats.no_cells ? 0.0 : (1.0 - lambda) * stats.l_cell);
  stats.grad_norm = train_.grad_clip ? clip_grad_norm(tensors_, *train_.grad_clip) : clip_grad_norm(tensors_, INFINITY);
  optimizer_.step(lr);
  return stats;
}

nlohmann::json EpochMetrics::to_json() const {
  nlohmann::json j{{"epoch", epoch},     {"step", step},     {"loss", loss},
                   {"l_struc", l_struc}, {"l_cell", l_cell}, {"lr", lr},
                   {"struct_acc", struct_acc}, {"cell_acc", cell_acc}};
  if (val_teds_struct) j["val_teds_struct"] = *val_teds_struct;
  return j;
}

fs::path checkpoint_name(const fs::path& out, int epoch) { return out / ("ep" + std::to_string(epoch) + ".wstb"); }

namespace {

double mean_teds_struct(const ModelParams& params, const NetConfig& net, const fs::path& data,
                        const std::string& split, unsigned threads) {
  auto records = load_records(data, split);
  InferOptions opts;
  opts.split = split;
  opts.threads = threads;
  auto preds = predict_dataset(params, net, data, opts);
  std::vector<IdHtml> p, g;
  for (auto& [id, html] : preds) p.push_back({id, html});
  for (auto& r : records) g.push_back({r.id, r.html});
  return score_records(p, g, threads).teds_struct.all;
}

}  // namespace

TrainResult train(const TrainOptions& options) {
  using clock = std::chrono::steady_clock;
  auto start = clock::now();
  const TrainConfig& cfg = options.train;
  cfg.validate();
  options.net.validate();

  auto samples = load_samples(options.data, options.net, std::string("train"), options.threads);
  if (samples.empty()) throw Error(Errc::DatasetEmpty, options.data.string() + " has no training records");
  bool validate_epochs = cfg.early_stop_patience > 0;
  if (validate_epochs && load_records(options.data, cfg.val_split).empty()) {
    throw Error(Errc::InvalidConfig, "early stopping needs records in split \"" + cfg.val_split + "\"");
  }

  std::error_code ec;
  fs::create_directories(options.out, ec);
  if (ec) throw Error(Errc::Io, "cannot create " + options.out.string() + ": " + ec.message());
  std::ofstream metrics(options.out / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw Error(Errc::Io, "cannot write metrics log in " + options.out.string());

  Trainer trainer(options.net, cfg, ModelParams::initialize(options.net, mix_seed(cfg.seed, 0)));
  nlohmann::json train_json = cfg;
  TrainResult result;
  std::vector<std::size_t> order(samples.size());
  std::int64_t step = 0;
  double best_val = -1;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.total_epochs(); ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, 1'000'000 + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cfg.lr_at(epoch);
    std::size_t batches = 0, s_tok = 0, s_hit = 0, c_tok = 0, c_hit = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        batch.push_back(&samples[order[i]]);
      }
      auto st = trainer.step(batch, m.lr, mix_seed(cfg.seed, 2'000'000 + static_cast<std::uint64_t>(step)));
      ++step;
      ++batches;
      m.loss += st.loss;
      m.l_struc += st.l_struc;
      m.l_cell += st.l_cell;
      s_tok += st.struct_tokens;
      s_hit += st.struct_correct;
      c_tok += st.cell_tokens;
      c_hit += st.cell_correct;
    }
    m.step = step;
    m.loss /= static_cast<double>(batches);
    m.l_struc /= static_cast<double>(batches);
    m.l_cell /= static_cast<double>(batches);
    m.struct_acc = s_tok ? static_cast<double>(s_hit) / static_cast<double>(s_tok) : 0.0;
    m.cell_acc = c_tok ? static_cast<double>(c_hit) / static_cast<double>(c_tok) : 0.0;

    result.last_checkpoint = checkpoint_name(options.out, epoch);
    save_checkpoint(result.last_checkpoint, trainer.params(), options.net, train_json);

    if (validate_epochs) {
      m.val_teds_struct = mean_teds_struct(trainer.params(), options.net, options.data, cfg.val_split, options.threads);
    }
    m.seconds = std::chrono::duration<double>(clock::now() - start).count();
    metrics << m.to_json().dump() << '\n';
    metrics.flush();
    if (options.on_epoch) options.on_epoch(m);
    result.history.push_back(m);

    if (validate_epochs) {
      if (*m.val_teds_struct > best_val) {
        best_val = *m.val_teds_struct;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        result.stopped_early = true;
        break;
      }
    }
    if (cfg.time_limit_s > 0 && m.seconds > cfg.time_limit_s && epoch < cfg.total_epochs()) {
      result.stopped_early = true;
      break;
    }
  }
  result.params = trainer.params().clone();
  return result;
}

}  // namespace wstab

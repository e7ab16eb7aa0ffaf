#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "wstab/checkpoint.hpp"
#include "wstab/dataset.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/presets.hpp"
#include "wstab/synth.hpp"
#include "wstab/training.hpp"

using namespace wstab;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

Tensor random_logits(Rng& rng, int rows, int vocab) {
  std::vector<ad::Real> v(static_cast<std::size_t>(rows * vocab));
  for (auto& x : v) x = 2.0 * rng.normal();
  return Tensor(ad::Shape{rows, vocab}, std::move(v), true);
}

TokenSeq random_targets(Rng& rng, int len, int vocab) {
  TokenSeq t;
  for (int i = 0; i < len; ++i) t.push_back(rng.uniform_int(1, vocab - 1));
  return t;
}

// Tiny dataset written once per test binary run.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    auto d = testutil::temp_dir("train_data");
    GenConfig g = preset("tiny").gen;
    g.seed = 3;
    generate(g, 12, d);
    return d;
  }();
  return dir;
}

TrainOptions tiny_options(const fs::path& data, const fs::path& out) {
  Preset p = preset("tiny");
  TrainOptions o;
  o.data = data;
  o.out = out;
  o.net = p.net;
  o.train = p.train;
  o.train.batch_size = 4;
  o.train.lr_schedule = {{2, 1e-3}, {1, 1e-4}};
  o.train.seed = 11;
  return o;
}

}  // namespace

TEST(LossTotal, EndpointsAndMidpoint) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s = random_logits(rng, 6, 25);
    TokenSeq st = random_targets(rng, 6, 25);
    std::vector<Tensor> cells{random_logits(rng, 3, 14), random_logits(rng, 1, 14)};
    std::vector<TokenSeq> ct{random_targets(rng, 3, 14), random_targets(rng, 1, 14)};
    auto at0 = loss_total(s, st, cells, ct, 0.0);
    auto at1 = loss_total(s, st, cells, ct, 1.0);
    auto mid = loss_total(s, st, cells, ct, 0.5);
    EXPECT_EQ(at0.total.item(), at0.l_cell);
    EXPECT_EQ(at1.total.item(), at1.l_struc);
    EXPECT_NEAR(mid.total.item(), 0.5 * (mid.l_struc + mid.l_cell), 1e-12);
    // affine in lambda
    auto at03 = loss_total(s, st, cells, ct, 0.3);
    EXPECT_NEAR(at03.total.item(), 0.3 * at1.total.item() + 0.7 * at0.total.item(), 1e-12);
  }
}

TEST(LossTotal, ComponentsAreTokenMeans) {
  Rng rng(2);
  Tensor s = random_logits(rng, 4, 10);
  TokenSeq st{3, 5, kPad, 2};
  std::vector<Tensor> cells{random_logits(rng, 2, 8), random_logits(rng, 3, 8)};
  std::vector<TokenSeq> ct{{4, 2}, {5, 6, 2}};
  auto r = loss_total(s, st, cells, ct, 0.5);
  EXPECT_NEAR(r.l_struc, ad::cross_entropy(s, st, kPad).item(), 1e-14);
  double pooled = ad::cross_entropy(cells[0], ct[0], kPad, ad::Reduction::Sum).item() +
                  ad::cross_entropy(cells[1], ct[1], kPad, ad::Reduction::Sum).item();
  EXPECT_NEAR(r.l_cell, pooled / 5.0, 1e-12);
}

TEST(LossTotal, NoCellsDropsCellTerm) {
  Rng rng(3);
  Tensor s = random_logits(rng, 3, 10);
  TokenSeq st{4, 5, 2};
  auto r = loss_total(s, st, {}, {}, 0.0);
  EXPECT_TRUE(r.no_cells);
  EXPECT_EQ(r.total.item(), 0.0);
  auto half = loss_total(s, st, {}, {}, 0.5);
  EXPECT_NEAR(half.total.item(), 0.5 * half.l_struc, 1e-15);
}

TEST(LossTotal, Misaligned) {
  Rng rng(4);
  Tensor s = random_logits(rng, 3, 10);
  TokenSeq st{4, 5, 2};
  std::vector<Tensor> cells{random_logits(rng, 2, 8)};
  std::vector<TokenSeq> two{{4, 2}, {2}};
  std::vector<TokenSeq> wrong_len{{4, 4, 2}};
  EXPECT_EQ(testutil::error_code([&] { loss_total(s, st, cells, two, 0.5); }), Errc::Misaligned);
  EXPECT_EQ(testutil::error_code([&] { loss_total(s, st, cells, wrong_len, 0.5); }), Errc::Misaligned);
}

TEST(TrainConfig, LrScheduleAndJson) {
  TrainConfig c;
  c.lr_schedule = {{2, 1e-3}, {1, 1e-4}};
  EXPECT_EQ(c.total_epochs(), 3);
  EXPECT_EQ(c.lr_at(1), 1e-3);
  EXPECT_EQ(c.lr_at(2), 1e-3);
  EXPECT_EQ(c.lr_at(3), 1e-4);
  EXPECT_EQ(c.lr_at(9), 1e-4);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  auto pairs = nlohmann::json::parse(R"({"lr_schedule": [[3, 0.01]], "optimizer": "sgd", "grad_clip": null})");
  TrainConfig d = pairs.get<TrainConfig>();
  EXPECT_EQ(d.lr_schedule, (std::vector<LrStage>{{3, 0.01}}));
  EXPECT_EQ(d.optimizer, OptimizerKind::Sgd);
  EXPECT_FALSE(d.grad_clip.has_value());
  c.lambda = 1.5;
  EXPECT_EQ(testutil::error_code([&] { c.validate(); }), Errc::InvalidConfig);
}

TEST(Optimizer, ZeroLearningRateLeavesParamsBitIdentical) {
  for (auto kind : {OptimizerKind::Adam, OptimizerKind::Sgd}) {
    Rng rng(5);
    Tensor w = random_logits(rng, 3, 4);
    std::vector<ad::Real> before(w.data().begin(), w.data().end());
    for (auto& g : w.mutable_grad()) g = rng.normal();
    Optimizer opt(kind, {w});
    opt.step(0.0);
    opt.step(0.0);
    EXPECT_EQ(std::vector<ad::Real>(w.data().begin(), w.data().end()), before);
  }
}

TEST(Optimizer, AdamFirstStepMovesBySignTimesLr) {
  Tensor w(ad::Shape{3}, {1.0, -2.0, 0.5}, true);
  auto g = w.mutable_grad();
  g[0] = 0.3;
  g[1] = -4.0;
  g[2] = 1e-3;
  Optimizer opt(OptimizerKind::Adam, {w});
  opt.step(0.01);
  // bias-corrected m/sqrt(v) equals g/|g| on the first step, up to eps
  EXPECT_NEAR(w.data()[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w.data()[1], -2.0 + 0.01, 1e-9);
  EXPECT_NEAR(w.data()[2], 0.5 - 0.01, 1e-7);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  Tensor a(ad::Shape{2}, {0, 0}, true), b(ad::Shape{1}, std::vector<ad::Real>{0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 0;
  b.mutable_grad()[0] = 4;
  std::vector<Tensor> ps{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.6);
  EXPECT_DOUBLE_EQ(b.grad()[0], 0.8);
  EXPECT_NEAR(clip_grad_norm(ps, 10.0), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(b.grad()[0], 0.8);
}

TEST(Checkpoint, RoundtripIsBitExactAndByteStable) {
  NetConfig net = preset("tiny").net;
  auto p = ModelParams::initialize(net, 7);
  auto dir = testutil::temp_dir("ckpt");
  nlohmann::json train = TrainConfig{};
  save_checkpoint(dir / "a.wstb", p, net, train);
  auto loaded = load_checkpoint(dir / "a.wstb");
  EXPECT_EQ(loaded.net, net);
  EXPECT_EQ(loaded.train, train);
  auto pt = p.parameters(), lt = loaded.params.parameters();
  ASSERT_EQ(pt.size(), lt.size());
  for (std::size_t i = 0; i < pt.size(); ++i) {
    for (std::size_t k = 0; k < pt[i].tensor.size(); ++k) {
      // stored as f32
      ASSERT_EQ(lt[i].tensor.data()[k], static_cast<double>(static_cast<float>(pt[i].tensor.data()[k])));
    }
  }
  save_checkpoint(dir / "b.wstb", loaded.params, loaded.net, loaded.train);
  EXPECT_EQ(testutil::read_file(dir / "a.wstb"), testutil::read_file(dir / "b.wstb"));
  auto again = load_checkpoint(dir / "b.wstb");
  for (std::size_t i = 0; i < lt.size(); ++i) {
    auto at = again.params.parameters();
    ASSERT_TRUE(std::equal(lt[i].tensor.data().begin(), lt[i].tensor.data().end(), at[i].tensor.data().begin()));
  }
}

TEST(Checkpoint, CorruptFilesRejected) {
  NetConfig net = preset("tiny").net;
  auto p = ModelParams::initialize(net, 8);
  auto dir = testutil::temp_dir("ckpt_bad");
  save_checkpoint(dir / "good.wstb", p, net, nlohmann::json::object());
  std::string bytes = testutil::read_file(dir / "good.wstb");

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  std::string wrong = bytes;
  wrong[0] = 'X';
  EXPECT_EQ(testutil::error_code([&] { load_checkpoint(write("magic.wstb", wrong)); }), Errc::BadMagic);
  for (std::size_t cut : {std::size_t{6}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_EQ(testutil::error_code([&] { load_checkpoint(write("cut.wstb", bytes.substr(0, cut))); }),
              Errc::TruncatedFile)
        << cut;
  }
  EXPECT_EQ(testutil::error_code([&] { load_checkpoint(write("long.wstb", bytes + "x")); }), Errc::DecodeError);
  EXPECT_EQ(testutil::error_code([&] { load_checkpoint(dir / "missing.wstb"); }), Errc::FileNotFound);

  NetConfig other = net;
  other.d_model = 32;
  other.ff_dim = 64;
  save_checkpoint(dir / "mismatch.wstb", p, other, nlohmann::json::object());
  EXPECT_EQ(testutil::error_code([&] { load_checkpoint(dir / "mismatch.wstb"); }), Errc::ShapeMismatch);
}

TEST(Trainer, ZeroLearningRateStepKeepsParams) {
  auto samples = load_samples(tiny_dataset(), preset("tiny").net);
  Preset p = preset("tiny");
  auto params = ModelParams::initialize(p.net, 1);
  auto before = params.clone();
  Trainer t(p.net, p.train, params);
  std::vector<const Sample*> batch{&samples[0], &samples[1]};
  auto stats = t.step(batch, 0.0, 9);
  EXPECT_GT(stats.loss, 0.0);
  EXPECT_GT(stats.grad_norm, 0.0);
  auto a = before.tensors(), b = t.params().tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
  }
}

TEST(Trainer, LossFallsOnRepeatedBatch) {
  auto samples = load_samples(tiny_dataset(), preset("tiny").net);
  Preset p = preset("tiny");
  Trainer t(p.net, p.train, ModelParams::initialize(p.net, 2));
  std::vector<const Sample*> batch{&samples[0], &samples[1], &samples[2]};
  double first = t.step(batch, 3e-3, 1).loss;
  double last = first;
  for (int i = 0; i < 40; ++i) last = t.step(batch, 3e-3, static_cast<std::uint64_t>(i + 2)).loss;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Train, LogsScheduleAndWritesCheckpoints) {
  auto out = testutil::temp_dir("train_log");
  auto result = train(tiny_options(tiny_dataset(), out));
  ASSERT_EQ(result.history.size(), 3u);
  auto log = read_jsonl(out / "metrics.jsonl");
  ASSERT_EQ(log.size(), 3u);
  std::vector<double> lrs;
  for (const auto& j : log) lrs.push_back(j["lr"].get<double>());
  EXPECT_EQ(lrs, (std::vector<double>{1e-3, 1e-3, 1e-4}));
  EXPECT_EQ(log[2]["epoch"].get<int>(), 3);
  EXPECT_EQ(log[2]["step"].get<int>(), 9);  // 12 samples, batch 4
  for (int e = 1; e <= 3; ++e) EXPECT_TRUE(fs::exists(checkpoint_name(out, e)));
  EXPECT_EQ(result.last_checkpoint, checkpoint_name(out, 3));
  EXPECT_FALSE(log[0].contains("seconds"));
}

TEST(Train, SameSeedGivesByteIdenticalCheckpoints) {
  auto a = testutil::temp_dir("train_det_a");
  auto b = testutil::temp_dir("train_det_b");
  auto oa = tiny_options(tiny_dataset(), a), ob = tiny_options(tiny_dataset(), b);
  oa.train.lr_schedule = ob.train.lr_schedule = {{1, 1e-3}};
  ob.threads = 3;
  train(oa);
  train(ob);
  EXPECT_EQ(testutil::read_file(checkpoint_name(a, 1)), testutil::read_file(checkpoint_name(b, 1)));
  EXPECT_EQ(testutil::read_file(a / "metrics.jsonl"), testutil::read_file(b / "metrics.jsonl"));

  auto c = testutil::temp_dir("train_det_c");
  auto oc = tiny_options(tiny_dataset(), c);
  oc.train.lr_schedule = {{1, 1e-3}};
  oc.train.seed = 12;
  train(oc);
  EXPECT_NE(testutil::read_file(checkpoint_name(a, 1)), testutil::read_file(checkpoint_name(c, 1)));
}

TEST(Train, BoundingBoxFieldsAreIgnored) {
  auto boxed = testutil::temp_dir("train_bbox_data");
  fs::copy(tiny_dataset() / "images", boxed / "images", fs::copy_options::recursive);
  auto records = read_jsonl(annotations_path(tiny_dataset()));
  Rng rng(4);
  for (auto& r : records) {
    r["bbox"] = {rng.uniform_int(0, 7), rng.uniform_int(0, 7), rng.uniform_int(0, 7), rng.uniform_int(0, 7)};
    r["cells"] = nlohmann::json::array({{{"bbox", {0, 0, 1, 1}}}});
  }
  write_jsonl(annotations_path(boxed), records);

  auto a = testutil::temp_dir("train_bbox_a");
  auto b = testutil::temp_dir("train_bbox_b");
  auto oa = tiny_options(tiny_dataset(), a), ob = tiny_options(boxed, b);
  oa.train.lr_schedule = ob.train.lr_schedule = {{1, 1e-3}};
  train(oa);
  train(ob);
  EXPECT_EQ(testutil::read_file(checkpoint_name(a, 1)), testutil::read_file(checkpoint_name(b, 1)));
}

TEST(Train, EmptyTrainSplitRejected) {
  auto data = testutil::temp_dir("train_empty");
  GenConfig g = preset("tiny").gen;
  g.test_fraction = 1.0;
  generate(g, 3, data);
  auto out = testutil::temp_dir("train_empty_out");
  EXPECT_EQ(testutil::error_code([&] { train(tiny_options(data, out)); }), Errc::DatasetEmpty);
}

TEST(Train, TimeLimitStopsAfterFirstEpoch) {
  auto out = testutil::temp_dir("train_time");
  auto o = tiny_options(tiny_dataset(), out);
  o.train.time_limit_s = 1e-9;
  auto r = train(o);
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(r.stopped_early);
}

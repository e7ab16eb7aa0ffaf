#pragma once

// Joint structure/cell loss, optimizers, and the epoch loop.
//
// A batch is processed one sample at a time, each on its own tape; gradients
// accumulate into the parameters in sample order, so a batch gives the same
// update regardless of how it is split into tapes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "wstab/dataset.hpp"
#include "wstab/network.hpp"

namespace wstab {

struct LrStage {
  int epochs = 1;
  double lr = 1e-3;
  bool operator==(const LrStage&) const = default;
};

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  double lambda = 0.5;
  std::vector<LrStage> lr_schedule{{40, 1e-3}, {10, 1e-4}};
  int batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip = 1.0;  // global L2 norm; nullopt disables
  // Stop after this many epochs without a better mean TEDS-struct on
  // `val_split`; 0 disables. Needs that split to exist in the dataset.
  int early_stop_patience = 0;
  std::string val_split = "val";
  // Stop after the first epoch that ends past this wall-clock budget; 0
  // disables. Makes the number of epochs depend on machine speed.
  double time_limit_s = 0;

  int total_epochs() const;
  /// Learning rate of a 1-based epoch; the last stage extends indefinitely.
  double lr_at(int epoch) const;
  /// Throws InvalidConfig.
  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossResult {
  ad::Tensor total;
  double l_struc = 0;
  double l_cell = 0;
  bool no_cells = false;  // the cell term was dropped because there were no cells
};

/// λ·L_struc + (1−λ)·L_cell with each term a mean over its non-pad target
/// tokens; the cell term pools every token of every cell. Throws Misaligned
/// when logits and targets disagree in count or length.
LossResult loss_total(const ad::Tensor& struct_logits, std::span<const int> struct_targets,
                      std::span<const ad::Tensor> cell_logits, std::span<const TokenSeq> cell_targets, double lambda);

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before scaling.
double clip_grad_norm(std::span<const ad::Tensor> params, double max_norm);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<ad::Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
            double eps = 1e-8);
  /// Applies the accumulated gradients. lr = 0 leaves values untouched.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  std::vector<ad::Tensor> params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

struct StepStats {
  double loss = 0;
  double l_struc = 0;
  double l_cell = 0;
  bool no_cells = false;
  std::size_t struct_tokens = 0;
  std::size_t struct_correct = 0;  // teacher-forced argmax hits
  std::size_t cell_tokens = 0;
  std::size_t cell_correct = 0;
  double grad_norm = 0;
};

/// One optimizer over a fixed parameter set.
class Trainer {
 public:
  Trainer(NetConfig net, TrainConfig train, ModelParams params);

  /// Forward/backward over the batch and one optimizer step at `lr`.
  /// `step_seed` drives dropout.
  StepStats step(std::span<const Sample* const> batch, double lr, std::uint64_t step_seed);

  const ModelParams& params() const { return params_; }
  const NetConfig& net() const { return net_; }
  const TrainConfig& config() const { return train_; }

 private:
  NetConfig net_;
  TrainConfig train_;
  ModelParams params_;
  std::vector<ad::Tensor> tensors_;
  Optimizer optimizer_;
};

struct EpochMetrics {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0;
  double l_struc = 0;
  double l_cell = 0;
  double lr = 0;
  double struct_acc = 0;
  double cell_acc = 0;
  std::optional<double> val_teds_struct;
  double seconds = 0;  // wall time, not written to the metrics log

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::filesystem::path data;
  std::filesystem::path out;  // receives ep{n}.wstb and metrics.jsonl
  NetConfig net;
  TrainConfig train;
  unsigned threads = 1;  // data loading and validation decoding
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> history;
  std::filesystem::path last_checkpoint;
  bool stopped_early = false;
};

/// Trains on the "train" split. Throws DatasetEmpty when it has no records,
/// DecodeError for corrupt ones.
TrainResult train(const TrainOptions& options);

std::filesystem::path checkpoint_name(const std::filesystem::path& out, int epoch);

}  // namespace wstab

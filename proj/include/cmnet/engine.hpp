#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cmnet/data.hpp"
#include "cmnet/model.hpp"

namespace cmnet {

enum class OptimizerKind { sgd_momentum, adaptive_moment };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

enum class ScheduleKind { none, step, halve_every };
std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule(const std::string& text);

struct Schedule {
  ScheduleKind kind = ScheduleKind::none;
  double factor = 0.1;     // step only
  std::size_t every = 15;  // epochs between decays

  // Epochs are counted from 0; decay k applies from epoch k * every.
  double lr_at(double base_lr, std::size_t epoch) const;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Schedule schedule;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  SamplingPolicy sampling = SamplingPolicy::none;
  bool augment = false;  // horizontal flip + padded random crop
  std::size_t crop_padding = 4;
  Normalization norm;
  bool grayscale_expand = false;
  ModelConfig model;  // alpha, sharing, division and the ablation row live here

  void validate() const;
  // The model configuration after applying the ablation row, if any.
  ModelConfig effective_model() const;
};

// Parameter update rules.
//   sgd_momentum:    v <- mu v + g;  p <- p - lr (v + wd p)
//   adaptive_moment: g' = g + wd p; bias-corrected first/second moments
template <typename T>
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::vector<Var<T>> params);

  // Applies one update with the given learning rate. Parameters that received
  // no gradient are treated as having a zero gradient.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const noexcept { return steps_; }

 private:
  OptimizerKind kind_;
  double momentum_, weight_decay_, beta1_, beta2_, eps_;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> first_;
  std::vector<Tensor<T>> second_;
  std::size_t steps_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double l_sl = 0.0;
  double l_gl = 0.0;
  double train_acc = 0.0;  // from the training-mode forward passes of the epoch
  std::optional<double> val_acc;
};

using History = std::vector<EpochRecord>;

struct Checkpoint {
  TensorTable parameters;
  TrainConfig config;
  std::size_t epoch = 0;  // epochs completed
  History history;
};

// Preprocessed images ready for batching.
struct PreparedSet {
  std::vector<Image> images;
  Labels labels;
  std::size_t num_classes = 0;
};
PreparedSet prepare(const Dataset& dataset, const TrainConfig& config);

template <typename T>
struct BatchTensors {
  Var<T> whole, left, right;
  Labels labels;
};
template <typename T>
BatchTensors<T> make_batch(const PreparedSet& set, const std::vector<std::size_t>& indices,
                           bool mirror_right);

// Graph-free forward of the whole set in inference mode; returns N x K logits.
Tensor<float> predict_logits(CmnetModel<float>& model, const PreparedSet& set,
                             std::size_t batch_size);
std::vector<std::size_t> argmax_rows(const Tensor<float>& logits);

std::unique_ptr<CmnetModel<float>> build_model(const TrainConfig& config);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs config.epochs epochs starting at `start_epoch`; the model is updated in
// place. Throws TrainingError on a non-finite loss.
History train(CmnetModel<float>& model, const Dataset& train_set, const Dataset* val_set,
              const TrainConfig& config, const EpochCallback& on_epoch = {},
              std::size_t start_epoch = 0);

Checkpoint make_checkpoint(CmnetModel<float>& model, const TrainConfig& config,
                           const History& history);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Builds the model described by the checkpoint and restores its state.
std::unique_ptr<CmnetModel<float>> restore_model(const Checkpoint& checkpoint);

// Fine-tuning entry: keeps all learned weights but swaps in a fresh head when
// the class count changes.
std::unique_ptr<CmnetModel<float>> restore_for_finetune(const Checkpoint& checkpoint,
                                                        std::size_t num_classes,
                                                        std::uint64_t seed);

void write_history_csv(const History& history, const std::filesystem::path& path);

}  // namespace cmnet

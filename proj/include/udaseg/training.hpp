#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "udaseg/evaluation.hpp"
#include "udaseg/losses.hpp"
#include "udaseg/networks.hpp"
#include "udaseg/synthetic.hpp"

namespace udaseg {

enum class TrainMode { kSA, kSF1, kSF2, kBaseline };
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

enum class Selection { kSourceDice, kTargetDice, kTargetNll };
std::string to_string(Selection s);

struct TrainConfig {
  TrainMode mode = TrainMode::kSA;
  int batch_source = 8;
  int batch_target = 8;
  LossWeights weights;
  VelocityPrior prior;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double basis_lr_scale = 1.0;  // learning-rate multiplier for the basis bank
  int epochs = 100;
  int val_every = 5;  // epochs between validations
  uint64_t seed = 0;
  bool deterministic = false;
  /// sf2 only: select by target reconstruction NLL (default) or target DSC.
  bool sf2_select_by_dice = false;
  /// Stop after this many optimizer steps (0: run all epochs).
  int64_t max_steps = 0;
  bool verbose = true;

  Selection selection() const;
  void validate(int64_t num_bases) const;
};

/// Labeled source data. Stage-one and baseline training only ever see this.
struct SourceData {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Target data: unlabeled train images plus a validation split whose labels
/// are used only for model selection when requested.
struct TargetData {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Everything stored in a checkpoint besides tensors.
struct CheckpointMeta {
  std::string kind;  // "udaseg" or "baseline"
  std::string mode;
  ModelConfig model;
  std::string train_config;  // JSON
  std::string config_hash;
  int64_t step = 0;
  int64_t epoch = 0;
  double best_metric = 0.0;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  double best_metric = 0.0;
  int64_t best_epoch = 0;
  int64_t steps = 0;
  std::vector<LossReport> history;  // one report per step
};

/// Single-stage training on labeled source and unlabeled target batches.
TrainResult train_source_accessible(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                    const SourceData& source, const TargetData& target,
                                    const std::filesystem::path& out_dir,
                                    const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Source-free stage one: source batches only.
TrainResult train_source_free_stage1(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                     const SourceData& source, const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Source-free stage two: target batches only; basis bank and segmentation
/// decoder stay frozen. `checkpoint` is either a stage-one checkpoint (fresh
/// start) or a stage-two checkpoint (resume).
TrainResult train_source_free_stage2(const TrainConfig& cfg, const TargetData& target,
                                     const std::filesystem::path& checkpoint,
                                     const std::filesystem::path& out_dir);

/// Source-only attention U-Net (cross-entropy + soft Dice), selected on source val.
TrainResult train_baseline(const TrainConfig& cfg, const ModelConfig& model_cfg, const SourceData& source,
                           const std::filesystem::path& out_dir,
                           const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Parameter groups never updated in stage two.
inline const std::vector<std::string> kFrozenInStage2{"basis_bank", "seg_decoder"};

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
std::string train_config_json(const TrainConfig& cfg);

/// FNV-1a over the bytes of a group's parameters.
uint64_t group_checksum(const ModelImpl& model, const std::string& group);

/// Throws InvariantViolation if any parameter of the named groups has a
/// gradient or requires one.
void assert_frozen(const ModelImpl& model, const std::vector<std::string>& groups);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  Model model{nullptr};
  AttentionUNet unet{nullptr};

  Predictor predictor() const;
};

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

void save_model_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                           torch::nn::Module& net, torch::optim::Optimizer* opt,
                           const std::optional<at::Generator>& gen);

}  // namespace udaseg

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cesaa/aea.hpp"
#include "cesaa/data.hpp"
#include "cesaa/layers.hpp"
#include "cesaa/metrics.hpp"
#include "cesaa/tensor.hpp"

namespace cesaa {

namespace detail {
// Stream tags so init, shuffling and gate noise never share a generator and
// only the noise stream needs serializing.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kNoiseStream = 3;
}  // namespace detail

struct TrainConfig {
  int epochs = 5;
  int batch_size = 1024;
  double lr = 1e-3;
  double alpha = 0.01;     // weight of the mutual-information loss
  double ema_beta = 0.99;  // joint-matrix decay
  int n_experts = 4;
  int top_k = 3;
  std::vector<int> hidden = {256, 128, 64};
  int embed_dim = 8;
  std::uint64_t seed = 42;
  Variant variant = Variant::kCesaa;

  void validate() const;
  ModelConfig model_config(const Dataset& data) const;
};

/// Mean binary cross-entropy; predictions are clamped to
/// [1e-12, 1 - 1e-12] through the log floor.
Tensor bce_loss(Tape& tape, Tensor yhat, std::span<const double> labels);

/// bce + alpha * mi. Without an mi term the bce tensor is returned as-is, so
/// no mutual-information gradient work happens at all.
Tensor total_loss(Tape& tape, Tensor bce, std::optional<Tensor> mi, double alpha);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Standard bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  /// Apply one update from the gradients currently stored in the parameters.
  void step();

  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t t) { step_ = t; }
  std::span<Parameter* const> params() const { return params_; }
  std::vector<double>& moment1(std::size_t i) { return m_[i]; }
  std::vector<double>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
};

struct StepMetrics {
  double bce = 0.0;
  double mi_loss = 0.0;  // 0 when the loss is inactive
  double total = 0.0;
  double mutual_information = 0.0;  // I(D;E) of the joint matrix after the update
  double gate_nonzeros_mean = 0.0;
  double gate_max_weight_mean = 0.0;
  bool aea_active = false;
};

struct EpochMetrics {
  int epoch = 0;
  double bce = 0.0;
  double mi_loss = 0.0;
  double total = 0.0;
  double mutual_information = 0.0;  // end of epoch
  double gate_nonzeros_mean = 0.0;
  int steps = 0;
};

enum class GroupKey { kGroup, kDomain };
GroupKey group_key_from_string(const std::string& s);
const char* to_string(GroupKey k);

struct EvalMetrics {
  double auc = 0.0;
  double gauc = 0.0;
  int gauc_groups_used = 0;
  int gauc_groups_excluded = 0;
  double mean_bce = 0.0;
  std::optional<double> mutual_information;  // of the supplied joint matrix
  RoutingReport routing;
};

/// Full forward pass over a dataset in evaluation mode (noise off,
/// deterministic): ranking metrics, mean loss and the routing report.
EvalMetrics evaluate(CesModel& model, const Dataset& data, GroupKey group_key,
                     const JointProbabilityMatrix* jpm = nullptr);

/// Owns one model + optimizer + joint matrix and runs the training loop:
/// shuffled epochs (last partial batch kept), forward, losses, backward,
/// Adam, then the detached EMA update of the joint matrix.
class Trainer {
 public:
  Trainer(const TrainConfig& config, const Dataset& train_data);

  StepMetrics step();
  EpochMetrics run_epoch();
  bool epoch_finished() const { return pos_ == 0; }

  const TrainConfig& config() const { return cfg_; }
  CesModel& model() { return *model_; }
  JointProbabilityMatrix& joint() { return jpm_; }
  Adam& optimizer() { return adam_; }
  std::uint64_t global_step() const { return global_step_; }
  int epoch() const { return epoch_; }

  void save_checkpoint(const std::string& path, const std::string& run_config_json) const;
  /// Rebuilds a trainer from a checkpoint; continuing to train is
  /// bit-identical to the uninterrupted run.
  static Trainer restore_checkpoint(const std::string& path, const Dataset& train_data);

 private:
  void rebuild_permutation();

  TrainConfig cfg_;
  const Dataset* data_;
  std::unique_ptr<CesModel> model_;
  JointProbabilityMatrix jpm_;
  Adam adam_;
  Rng noise_rng_;
  Tape tape_;
  std::vector<int> perm_;
  std::size_t pos_ = 0;
  int epoch_ = 0;
  std::uint64_t global_step_ = 0;
};

/// Model + joint matrix + config reconstructed from a checkpoint, enough to
/// evaluate or inspect routing without the original trainer.
struct LoadedModel {
  TrainConfig config;
  std::string run_config_json;
  std::unique_ptr<CesModel> model;
  JointProbabilityMatrix jpm;
};

LoadedModel load_model(const std::string& path);

}  // namespace cesaa

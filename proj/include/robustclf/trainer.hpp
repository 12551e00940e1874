#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustclf/feature_bank.hpp"
#include "robustclf/losses.hpp"
#include "robustclf/net.hpp"
#include "robustclf/optim.hpp"
#include "robustclf/train_config.hpp"

namespace robustclf {

/// Thrown when a loss or gradient turns non-finite. `dump()` holds a
/// key=value snapshot of the state at the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  double mean_cvar = 0.0;
  double mean_auc = 0.0;
  double mean_lambda = 0.0;
  /// Learning rate at the epoch's first step.
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::size_t batches = 0;
  std::size_t single_class_batches = 0;
};

struct TrainRunRecord {
  TrainConfig config;
  std::size_t n_examples = 0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t batches_per_epoch = 0;
  std::uint64_t total_steps = 0;
  /// True when the bank lacks a class, so the AUC term was zero throughout.
  bool auc_term_inactive = false;
  std::vector<EpochMetrics> epochs;
  std::string checkpoint_path;
};

struct TrainResult {
  MlpModel model;
  TrainRunRecord record;
};

/// Row partition of one epoch: shuffled indices cut into batch_size chunks.
/// A trailing chunk of a single row is merged into the previous chunk since
/// train-mode batchnorm needs two rows.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& shuffle_rng);

struct StepOutcome {
  /// Loss at the clean parameters; its lambda is reused at theta + eps.
  LossReport clean;
  /// Loss at theta + eps (equal to `clean` when SAM is off).
  LossReport perturbed;
  Gradients clean_gradient;
  /// Gradient handed to Adam.
  Gradients applied_gradient;
  /// SAM perturbation; empty when SAM is off.
  std::vector<double> epsilon;
};

/// One mini-batch update:
///  1. train-mode forward (fresh dropout masks, running stats updated),
///  2. per-example BCE and the fitted lambda,
///  3. gradient at theta and eps = compute_epsilon(gradient),
///  4. loss and gradient at theta + eps with lambda and dropout masks held,
///  5. Adam step at `lr` with the step-4 gradient.
/// Without SAM, steps 3-4 collapse to the clean gradient.
StepOutcome training_step(MlpModel& model, AdamState& adam, const Matrix& batch, std::span<const Label> labels,
                          const TrainConfig& config, double lr, Rng& dropout_rng);

/// Buffers kept alive between steps so large vectors are not reallocated.
struct StepWorkspace {
  StepOutcome outcome;
  std::vector<double> saved_params;
};

/// training_step() filling `workspace.outcome` in place.
const StepOutcome& training_step(MlpModel& model, AdamState& adam, const Matrix& batch,
                                 std::span<const Label> labels, const TrainConfig& config, double lr,
                                 Rng& dropout_rng, StepWorkspace& workspace);

/// Model built and initialized exactly as train() does for this config.
MlpModel initial_model(std::size_t input_dim, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Full training run over `bank`. Deterministic in (bank, config).
TrainResult train(const FeatureBank& bank, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// key=value text: the config under "config." keys, run facts, then
/// "epoch.<k>.<metric>" lines.
std::string run_record_text(const TrainRunRecord& record);
void write_run_record(const TrainRunRecord& record, const std::filesystem::path& path);
TrainRunRecord read_run_record(const std::filesystem::path& path);

}  // namespace robustclf
